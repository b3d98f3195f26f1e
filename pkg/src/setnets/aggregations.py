"""Non-learnable aggregations over particle populations.

An aggregation maps the particle axis of an embedding array [.., n, k] to a
single description [.., k], and is invariant to particle order. The zoo here
covers the plain reducers (sum, mean, max, logsumexp, percentiles), weighted
variants used by attention-style aggregation, and reducers built as a sum in
an isomorphic space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node


class EmptyPopulationError(ValueError):
    """Aggregation requested over a population with no particles."""


class InvalidWeightsError(ValueError):
    """Weighted aggregation received a negative weight."""


class IsomorphismDomainError(ValueError):
    """Input left the valid domain of the isomorphism pair."""


SIMPLE_KINDS = ("sum", "mean", "max", "logsumexp", "percentile")


@dataclass(frozen=True)
class SimpleAggregation:
    """A plain invariant reducer; `p` is only meaningful for percentiles."""

    kind: str
    p: float | None = None

    def __post_init__(self):
        if self.kind not in SIMPLE_KINDS:
            raise ValueError(f"unknown aggregation kind {self.kind!r}")
        if self.kind == "percentile":
            if self.p is None or not 0.0 <= self.p <= 1.0:
                raise ValueError(f"percentile needs p in [0, 1], got {self.p}")
        elif self.p is not None:
            raise ValueError(f"{self.kind} takes no percentile parameter")


def _particle_count(embeddings: Node) -> int:
    if embeddings.ndim < 2:
        raise ad.ShapeMismatchError(
            f"aggregate expects [.., particles, features], got {embeddings.shape}"
        )
    return embeddings.shape[-2]


def aggregate(agg: SimpleAggregation, embeddings: Node) -> Node:
    """Reduce the particle axis of [.., n, k] to [.., k].

    Differentiable through the graph; the empty population is an error
    here because no single neutral element fits every kind.
    """
    if _particle_count(embeddings) == 0:
        raise EmptyPopulationError("aggregate over an empty population")
    if agg.kind == "sum":
        return ad.reduce_sum(embeddings, -2)
    if agg.kind == "mean":
        return ad.reduce_mean(embeddings, -2)
    if agg.kind == "max":
        return ad.reduce_max(embeddings, -2)
    if agg.kind == "logsumexp":
        return ad.logsumexp(embeddings, -2)
    return ad.sort_select(embeddings, -2, agg.p)


def aggregate_weighted(agg: SimpleAggregation, weights: Node, embeddings: Node) -> Node:
    """Scale particle rows by non-negative weights, then reduce.

    The weights multiply the embeddings first and the reducer is applied to
    the scaled rows, so e.g. max aggregation sees the scaled values.
    """
    if _particle_count(embeddings) == 0:
        raise EmptyPopulationError("aggregate_weighted over an empty population")
    if weights.shape != embeddings.shape[:-1]:
        raise ad.ShapeMismatchError(
            f"weights {weights.shape} do not match particles of {embeddings.shape}"
        )
    if np.any(weights.values < 0):
        raise InvalidWeightsError("negative aggregation weight")
    return aggregate(agg, ad.scale_rows(embeddings, weights))


ISOMORPHISM_TAGS = ("identity", "log_exp", "append_count")


@dataclass(frozen=True)
class SumIsomorphism:
    """A reducer of the form g(sum_i g_inverse(e_i)).

    Tags: identity (plain sum), log_exp (g = ln, giving logsumexp), and
    append_count (g divides by an appended counter, giving the mean).
    """

    tag: str

    def __post_init__(self):
        if self.tag not in ISOMORPHISM_TAGS:
            raise ValueError(f"unknown isomorphism tag {self.tag!r}")

    def g_forward(self, x: np.ndarray) -> np.ndarray:
        if self.tag == "identity":
            return np.asarray(x, dtype=np.float64)
        if self.tag == "log_exp":
            return np.log(x)
        return x[..., :-1] / x[..., -1:]

    def g_inverse(self, x: np.ndarray) -> np.ndarray:
        if self.tag == "identity":
            return np.asarray(x, dtype=np.float64)
        if self.tag == "log_exp":
            return np.exp(x)
        ones = np.ones(x.shape[:-1] + (1,))
        return np.concatenate([x, ones], axis=-1)


def aggregate_isomorphic(iso: SumIsomorphism, embeddings: Node) -> Node:
    """Evaluate g(sum g_inverse(e_i)) over the particle axis.

    Built from the literal composition, so it provides an independent route
    to logsumexp (log_exp) and mean (append_count) for cross-checking.
    """
    n = _particle_count(embeddings)
    if n == 0:
        raise EmptyPopulationError("aggregate_isomorphic over an empty population")
    if iso.tag == "identity":
        return ad.reduce_sum(embeddings, -2)
    if iso.tag == "log_exp":
        out = ad.log(ad.reduce_sum(ad.exp(embeddings), -2))
        if not np.all(np.isfinite(out.values)):
            raise IsomorphismDomainError("log_exp overflowed the exp domain")
        return out
    # append_count: lift with a counter coordinate, sum, divide it out.
    k = embeddings.shape[-1]
    ones = ad.constant(np.ones(embeddings.shape[:-1] + (1,)))
    lifted = ad.concat([embeddings, ones], axis=-1)
    summed = ad.reduce_sum(lifted, -2)
    head = ad.slice_axis(summed, -1, 0, k)
    count = float(summed.values.reshape(-1, k + 1)[0, -1])  # exact integer sum
    return ad.scale(head, 1.0 / count)


@dataclass(frozen=True)
class ProfileRow:
    scale: float
    gap_to_max: float
    gap_to_linear: float


def interpolation_profile(rows, scales) -> list[ProfileRow]:
    """Measure how logsumexp moves between max and a shifted linear map.

    For each positive scale s, reports the sup-norm gaps between columnwise
    logsumexp(s * rows) and (a) columnwise max(s * rows), (b) the linear
    approximation ln(n) + s * mean(rows). Large scales approach max, small
    scales approach the linear form.
    """
    a = np.asarray(getattr(rows, "values", rows), dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 2:
        raise ValueError(f"profile needs [n >= 2, k] rows, got shape {a.shape}")
    n = a.shape[0]
    out = []
    for s in scales:
        s = float(s)
        if s <= 0:
            raise ValueError(f"scales must be positive, got {s}")
        scaled = s * a
        m = scaled.max(axis=0)
        lse = m + np.log(np.exp(scaled - m).sum(axis=0))
        linear = np.log(n) + s * a.mean(axis=0)
        out.append(ProfileRow(
            scale=s,
            gap_to_max=float(np.max(np.abs(lse - scaled.max(axis=0)))),
            gap_to_linear=float(np.max(np.abs(lse - linear))),
        ))
    return out
