"""Loss heads, a first-order optimizer, and the training loop.

Training data is generated on the fly: every step draws a fresh batch of
populations (the mixture task also draws the batch's population size with
probability proportional to the size). A run is fully determined by its
config, including the seed; wall-clock time is the one recorded field that
is not reproducible.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import gammaln

from . import autodiff as ad
from .autodiff import Node, Rng
from .model import AggregationSpec, DeepSetModel, ModelArch, build_model, forward
from .tasks import Circle, beta_log_likelihood, sample_circle_task, sample_gmm_task


class InvalidRangeError(ValueError):
    """Population-size range is empty or out of bounds."""


class NonFiniteLossError(RuntimeError):
    """Training loss left the finite reals."""


TASKS = ("circle", "mixture")
HEADS = ("circle_head", "beta_head")


@dataclass(frozen=True)
class TrainConfig:
    """Everything a training run depends on, serializable to JSON."""

    task: str
    equivariant_agg: AggregationSpec = field(default_factory=AggregationSpec)
    final_agg: AggregationSpec = field(default_factory=AggregationSpec)
    learning_rate: float = 1e-3
    steps: int = 20000
    batch_size: int = 32
    n_min: int = 20
    n_max: int = 20
    seed: int = 0
    head: str = "circle_head"
    embed_widths: tuple[int, ...] = (64, 64)
    combine_widths: tuple[int, ...] = (64, 64)
    process_widths: tuple[int, ...] = (64,)
    activation: str = "tanh"
    clip_norm: float = 10.0
    record_every: int = 100
    eval_populations: int = 1000

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}")
        if self.steps <= 0 or self.batch_size <= 0:
            raise ValueError("steps and batch_size must be positive")
        floor = 3 if self.task == "circle" else 2
        if not floor <= self.n_min <= self.n_max:
            raise InvalidRangeError(
                f"population range [{self.n_min}, {self.n_max}] invalid for {self.task}"
            )
        for key in ("embed_widths", "combine_widths", "process_widths"):
            object.__setattr__(self, key, tuple(getattr(self, key)))

    @classmethod
    def defaults(cls, task: str, **overrides) -> "TrainConfig":
        """Canonical per-task settings: the circle task trains at fixed
        n = 20; the mixture task draws sizes from [10, 100] with
        probability proportional to n."""
        if task == "circle":
            base = dict(task="circle", head="circle_head", steps=20000,
                        n_min=20, n_max=20)
        elif task == "mixture":
            base = dict(task="mixture", head="beta_head", steps=30000,
                        n_min=10, n_max=100)
        else:
            raise ValueError(f"unknown task {task!r}")
        base.update(overrides)
        return cls(**base)

    @property
    def output_dim(self) -> int:
        return 3 if self.head == "circle_head" else 2

    def arch(self) -> ModelArch:
        return ModelArch(
            input_dim=2, output_dim=self.output_dim,
            embed_widths=self.embed_widths, combine_widths=self.combine_widths,
            process_widths=self.process_widths,
            equivariant_agg=self.equivariant_agg, final_agg=self.final_agg,
            activation=self.activation,
        )

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "equivariant_agg": self.equivariant_agg.to_dict(),
            "final_agg": self.final_agg.to_dict(),
            "learning_rate": self.learning_rate,
            "steps": self.steps,
            "batch_size": self.batch_size,
            "n_min": self.n_min,
            "n_max": self.n_max,
            "seed": self.seed,
            "head": self.head,
            "embed_widths": list(self.embed_widths),
            "combine_widths": list(self.combine_widths),
            "process_widths": list(self.process_widths),
            "activation": self.activation,
            "clip_norm": self.clip_norm,
            "record_every": self.record_every,
            "eval_populations": self.eval_populations,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["equivariant_agg"] = AggregationSpec.from_dict(d.get("equivariant_agg", {}))
        d["final_agg"] = AggregationSpec.from_dict(d.get("final_agg", {}))
        for key in ("embed_widths", "combine_widths", "process_widths"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def config_id(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


@dataclass
class ExperimentRecord:
    """One run's outcome: config fingerprint, seed, loss trajectory,
    final metrics, wall-clock seconds, and a status tag."""

    config_id: str
    seed: int
    status: str = "ok"
    losses: list = field(default_factory=list)  # (step, loss) pairs
    metrics: dict = field(default_factory=dict)
    seconds: float = 0.0
    failed_step: int | None = None
    config: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "config_id": self.config_id, "seed": self.seed, "status": self.status,
            "losses": [[s, v] for s, v in self.losses], "metrics": self.metrics,
            "seconds": self.seconds, "failed_step": self.failed_step,
            "config": self.config, "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentRecord":
        rec = cls(config_id=d["config_id"], seed=d["seed"], status=d["status"],
                  losses=[tuple(x) for x in d.get("losses", [])],
                  metrics=d.get("metrics", {}), seconds=d.get("seconds", 0.0),
                  failed_step=d.get("failed_step"), config=d.get("config", {}),
                  meta=d.get("meta", {}))
        return rec

    def scientific_dict(self) -> dict:
        """Everything reproducible from the config: excludes wall-clock."""
        d = self.to_dict()
        d.pop("seconds")
        return d


# ---------------------------------------------------------------------------
# heads and losses
# ---------------------------------------------------------------------------

def apply_head(head: str, raw: Node) -> Node:
    """Map raw model outputs to task quantities (positivity via softplus)."""
    if head == "circle_head":
        center = ad.slice_axis(raw, -1, 0, 2)
        radius = ad.softplus(ad.slice_axis(raw, -1, 2, 3))
        return ad.concat([center, radius], axis=-1)
    if head == "beta_head":
        return ad.softplus(raw)
    raise ValueError(f"unknown head {head!r}")


def circle_loss(prediction: Node, target: Circle) -> Node:
    """Squared error of center plus squared error of radius."""
    t = ad.constant([target.center[0], target.center[1], target.radius])
    return _circle_loss_rows(prediction, t)


def _circle_loss_rows(prediction: Node, targets: Node) -> Node:
    d = ad.sub(prediction, targets)
    return ad.reduce_sum(ad.mul(d, d), -1)


def mixture_loss(prediction: Node, weight_small) -> Node:
    """Negative log-likelihood of the true smaller weight under the Beta
    distribution parameterized by the softplus-mapped raw outputs."""
    return ad.scale(beta_log_likelihood(ad.softplus(prediction), weight_small), -1.0)


def sample_population_size(rng: Rng, n_min: int, n_max: int) -> int:
    """Draw a population size with P(N = n) proportional to n."""
    if n_min < 1 or n_min > n_max:
        raise InvalidRangeError(f"invalid range [{n_min}, {n_max}]")
    sizes = np.arange(n_min, n_max + 1)
    probs = sizes / sizes.sum()
    return int(rng.gen.choice(sizes, p=probs))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Adaptive-moment gradient descent over named parameter nodes."""

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros(node.shape) for name, node in self.params}
        self.v = {name: np.zeros(node.shape) for name, node in self.params}

    def zero_grad(self):
        for _, node in self.params:
            node.grad = None

    def step(self):
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        correct1 = 1.0 - b1 ** self.step_count
        correct2 = 1.0 - b2 ** self.step_count
        for name, node in self.params:
            g = node.grad
            if g is None:
                g = 0.0
            m = self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1.0 - b2) * np.square(g)
            update = (m / correct1) / (np.sqrt(v / correct2) + self.eps)
            node.values = node.values - self.lr * update


def clip_gradients(params, max_norm: float) -> float:
    """Scale all gradients so their global norm is at most max_norm."""
    total = 0.0
    for _, node in params:
        if node.grad is not None:
            total += float(np.square(node.grad).sum())
    norm = total ** 0.5
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for _, node in params:
            if node.grad is not None:
                node.grad = node.grad * factor
    return norm


# ---------------------------------------------------------------------------
# batches and the loop
# ---------------------------------------------------------------------------

def sample_batch(config: TrainConfig, rng: Rng):
    """Fresh batch: stacked populations [B, n, 2] plus targets.

    The whole batch shares one population size; for the mixture task that
    size is drawn per step with P(N = n) proportional to n.
    """
    if config.task == "circle":
        n = config.n_max
    else:
        n = sample_population_size(rng, config.n_min, config.n_max)
    pops, targets = [], []
    for _ in range(config.batch_size):
        if config.task == "circle":
            points, circ = sample_circle_task(rng, n)
            targets.append([circ.center[0], circ.center[1], circ.radius])
        else:
            points, weight_small = sample_gmm_task(rng, n)
            targets.append(weight_small)
        pops.append(points)
    return np.stack(pops), np.asarray(targets, dtype=np.float64)


def population_batch_loss(model: DeepSetModel, head: str, populations, targets) -> Node:
    """Mean per-population loss of a stacked batch [B, n, d]."""
    raw = forward(model, ad.constant(populations))
    if head == "circle_head":
        per_pop = _circle_loss_rows(apply_head(head, raw), ad.constant(targets))
    else:
        per_pop = mixture_loss(raw, targets)
    return ad.reduce_mean(per_pop, 0)


def evaluate(model: DeepSetModel, config: TrainConfig, rng: Rng,
             populations: int | None = None, chunk: int = 200) -> dict:
    """Held-out metrics on fresh populations at the task's reference size
    (circle: the training size; mixture: the top of the size range)."""
    count = populations or config.eval_populations
    n = config.n_max
    metrics: dict[str, float] = {}
    sums = {}
    done = 0
    while done < count:
        take = min(chunk, count - done)
        batch_cfg = replace(config, batch_size=take, n_min=n, n_max=n)
        pops, targets = sample_batch(batch_cfg, rng.child(f"eval{done}"))
        pred = apply_head(config.head, forward(model, ad.constant(pops))).values
        if config.task == "circle":
            err = pred - targets
            sums.setdefault("center", 0.0)
            sums.setdefault("radius", 0.0)
            sums["center"] += float(np.square(err[:, :2]).sum())
            sums["radius"] += float(np.square(err[:, 2]).sum())
        else:
            a, b = pred[:, 0], pred[:, 1]
            ll = ((a - 1) * np.log(targets) + (b - 1) * np.log1p(-targets)
                  + _log_beta_const(a, b))
            sums.setdefault("nll", 0.0)
            sums.setdefault("abs_err", 0.0)
            sums["nll"] += float(-ll.sum())
            sums["abs_err"] += float(np.abs(a / (a + b) - targets).sum())
        done += take
    if config.task == "circle":
        metrics["center_mse"] = sums["center"] / count
        metrics["radius_mse"] = sums["radius"] / count
        metrics["best_mse"] = metrics["center_mse"] + metrics["radius_mse"]
    else:
        metrics["beta_nll"] = sums["nll"] / count
        metrics["est_abs_err"] = sums["abs_err"] / count
    return metrics


def _log_beta_const(a, b):
    return gammaln(a + b) - gammaln(a) - gammaln(b)


def train(config: TrainConfig):
    """Run the full loop; returns (model, record).

    A non-finite loss aborts the run: the record carries status
    "non_finite_loss" and the offending step index instead of raising, so
    grid sweeps stay isolated.
    """
    started = time.perf_counter()
    rng = Rng(config.seed)
    model = build_model(config.arch(), rng.child("init"))
    params = list(model.parameters())
    opt = Adam(params, lr=config.learning_rate)
    data_rng = rng.child("data")
    record = ExperimentRecord(
        config_id=config.config_id(), seed=config.seed,
        config=config.to_dict(),
        meta={"embedding_dim": config.arch().embedding_dim,
              "train_n_max": config.n_max},
    )
    for step in range(config.steps):
        pops, targets = sample_batch(config, data_rng.child(f"step{step}"))
        loss = population_batch_loss(model, config.head, pops, targets)
        loss_value = loss.item()
        if not np.isfinite(loss_value):
            record.status = "non_finite_loss"
            record.failed_step = step
            record.seconds = time.perf_counter() - started
            return model, record
        if step % config.record_every == 0 or step == config.steps - 1:
            record.losses.append((step, loss_value))
        opt.zero_grad()
        ad.backward(loss)
        clip_gradients(params, config.clip_norm)
        opt.step()
    record.metrics = evaluate(model, config, rng.child("heldout"))
    record.seconds = time.perf_counter() - started
    return model, record
