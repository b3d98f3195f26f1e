"""Permutation-invariant learning on particle populations.

Submodules:

* autodiff: minimal reverse-mode engine (float64, rank <= 3) and seeded RNG
* aggregations: plain / weighted / isomorphic reducers, interpolation probe
* recurrent: single-query attention and the recurrent aggregation
* model: the invariant embed / combine / aggregate / process architecture
* tasks: circle and mixture-weight generators, oracles, EM + KDE baselines
* training: loss heads, Adam, the training loop
* harness: grids, bootstrap peak analysis, sweeps, EM comparison, reports
* cli: the `setnets` command-line entry point
"""

from .autodiff import Node, Rng, backward, grad_check
from .aggregations import SimpleAggregation, SumIsomorphism, aggregate
from .model import AggregationSpec, DeepSetModel, ModelArch, build_model, forward
from .training import TrainConfig, train

__all__ = [
    "Node", "Rng", "backward", "grad_check",
    "SimpleAggregation", "SumIsomorphism", "aggregate",
    "AggregationSpec", "DeepSetModel", "ModelArch", "build_model", "forward",
    "TrainConfig", "train",
]

__version__ = "0.1.0"
