"""The invariant set-to-vector architecture.

A population [.., n, d] flows through a per-particle embedding MLP, a stack
of equivariant layers (each centers its input by a broadcast aggregation,
then applies a per-particle affine map and activation), one final invariant
aggregation, and a processing MLP on the pooled description. Aggregations at
both sites are pluggable: plain reducers, single-query attention, or the
recurrent variant.

Models serialize to a versioned JSON blob with an architecture fingerprint
header; floats round-trip bitwise through repr.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Rng
from .aggregations import SIMPLE_KINDS, SimpleAggregation, aggregate
from .recurrent import (
    QueryAggregationParams,
    RecurrentAggregationParams,
    glorot,
    init_query_aggregation,
    init_recurrent_aggregation,
    query_aggregate,
    recurrent_aggregate,
)

BLOB_FORMAT = "setnets-model"
BLOB_VERSION = 1

ACTIVATIONS = {"relu": ad.relu, "tanh": ad.tanh}


class ParseError(ValueError):
    """Malformed model blob; `offset` is the byte position when known."""

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class ArchitectureMismatchError(ValueError):
    """Parameter blob belongs to a different architecture."""


# ---------------------------------------------------------------------------
# aggregation configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AggregationSpec:
    """Serializable description of an aggregation site.

    variant "simple" uses `kind` (and `p` for percentiles) directly;
    "query" and "recurrent" use `kind` as the base reducer of the weighted
    rows. `steps` and `backward` only apply to the recurrent variant.
    """

    variant: str = "simple"
    kind: str = "mean"
    p: float | None = None
    steps: int = 3
    backward: str = "lstm"

    def __post_init__(self):
        if self.variant not in ("simple", "query", "recurrent"):
            raise ValueError(f"unknown aggregation variant {self.variant!r}")
        if self.kind not in SIMPLE_KINDS:
            raise ValueError(f"unknown base kind {self.kind!r}")

    def base(self) -> SimpleAggregation:
        return SimpleAggregation(self.kind, self.p)

    def label(self) -> str:
        tag = {"simple": "", "query": "q-", "recurrent": "r-"}[self.variant]
        extra = f"(p={self.p})" if self.kind == "percentile" else ""
        return f"{tag}{self.kind}{extra}"

    def to_dict(self) -> dict:
        d = {"variant": self.variant, "kind": self.kind}
        if self.kind == "percentile":
            d["p"] = self.p
        if self.variant == "recurrent":
            d["steps"] = self.steps
            d["backward"] = self.backward
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AggregationSpec":
        return cls(variant=d.get("variant", "simple"), kind=d.get("kind", "mean"),
                   p=d.get("p"), steps=d.get("steps", 3),
                   backward=d.get("backward", "lstm"))


def build_aggregator(spec: AggregationSpec, k: int, rng: Rng):
    if spec.variant == "simple":
        return spec.base()
    if spec.variant == "query":
        return init_query_aggregation(k, spec.base())
    return init_recurrent_aggregation(rng, k, steps=spec.steps, base=spec.base(),
                                      backward=spec.backward)


def apply_aggregation(agg, embeddings: Node) -> Node:
    """Dispatch over the three aggregator families."""
    if isinstance(agg, SimpleAggregation):
        return aggregate(agg, embeddings)
    if isinstance(agg, QueryAggregationParams):
        return query_aggregate(agg, embeddings)
    if isinstance(agg, RecurrentAggregationParams):
        return recurrent_aggregate(agg, embeddings)
    raise TypeError(f"not an aggregator: {type(agg).__name__}")


def _aggregator_parameters(agg, prefix: str):
    if isinstance(agg, SimpleAggregation):
        return
    yield from agg.parameters(prefix)


# ---------------------------------------------------------------------------
# multilayer perceptrons and equivariant layers
# ---------------------------------------------------------------------------

@dataclass
class MlpParams:
    """Dense layers applied to the trailing feature axis.

    `widths` lists the input width followed by each layer's output width;
    a single-entry widths tuple means the identity map. The activation sits
    between layers; the last layer stays linear.
    """

    widths: tuple[int, ...]
    weights: list[Node] = field(default_factory=list)
    biases: list[Node] = field(default_factory=list)
    activation: str = "tanh"

    def parameters(self, prefix: str = ""):
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            yield f"{prefix}{i}.weight", w
            yield f"{prefix}{i}.bias", b


def init_mlp(rng: Rng, widths, activation: str = "tanh") -> MlpParams:
    widths = tuple(int(w) for w in widths)
    if len(widths) < 1:
        raise ValueError("widths must name at least the input width")
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    weights, biases = [], []
    for i, (a, b) in enumerate(zip(widths, widths[1:])):
        weights.append(glorot(rng.child(f"w{i}"), a, b))
        biases.append(ad.parameter(np.zeros(b)))
    return MlpParams(widths=widths, weights=weights, biases=biases, activation=activation)


def mlp_forward(params: MlpParams, x: Node) -> Node:
    act = ACTIVATIONS[params.activation]
    out = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        out = ad.matmul(out, w)
        out = ad.add(out, ad.broadcast_to(b, out.shape))
        if i != last:
            out = act(out)
    return out


@dataclass
class EquivariantLayerParams:
    """Center by a broadcast aggregation, then per-particle affine + act."""

    weight: Node
    bias: Node
    activation: str
    agg: object  # SimpleAggregation | QueryAggregationParams | RecurrentAggregationParams

    def parameters(self, prefix: str = ""):
        yield prefix + "weight", self.weight
        yield prefix + "bias", self.bias
        yield from _aggregator_parameters(self.agg, prefix + "agg.")


def init_equivariant_layer(rng: Rng, k_in: int, k_out: int, spec: AggregationSpec,
                           activation: str = "tanh") -> EquivariantLayerParams:
    return EquivariantLayerParams(
        weight=glorot(rng.child("weight"), k_in, k_out),
        bias=ad.parameter(np.zeros(k_out)),
        activation=activation,
        agg=build_aggregator(spec, k_in, rng.child("agg")),
    )


def equivariant_layer(params: EquivariantLayerParams, H: Node) -> Node:
    """act((H - row_broadcast(agg(H))) W + b); permutation-equivariant."""
    pooled = apply_aggregation(params.agg, H)
    centered = ad.sub(H, ad.broadcast_row(pooled, H.shape[-2]))
    affine = ad.matmul(centered, params.weight)
    affine = ad.add(affine, ad.broadcast_to(params.bias, affine.shape))
    return ACTIVATIONS[params.activation](affine)


# ---------------------------------------------------------------------------
# the full model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelArch:
    """Widths and aggregation choices; the serialization fingerprint."""

    input_dim: int
    output_dim: int
    embed_widths: tuple[int, ...] = (64, 64)
    combine_widths: tuple[int, ...] = (64, 64)
    process_widths: tuple[int, ...] = (64,)
    equivariant_agg: AggregationSpec = field(default_factory=AggregationSpec)
    final_agg: AggregationSpec = field(default_factory=AggregationSpec)
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "embed_widths", tuple(self.embed_widths))
        object.__setattr__(self, "combine_widths", tuple(self.combine_widths))
        object.__setattr__(self, "process_widths", tuple(self.process_widths))

    @property
    def embedding_dim(self) -> int:
        return self.embed_widths[-1] if self.embed_widths else self.input_dim

    @property
    def pooled_dim(self) -> int:
        return self.combine_widths[-1] if self.combine_widths else self.embedding_dim

    def to_dict(self) -> dict:
        d = asdict(self)
        d["equivariant_agg"] = self.equivariant_agg.to_dict()
        d["final_agg"] = self.final_agg.to_dict()
        for key in ("embed_widths", "combine_widths", "process_widths"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelArch":
        return cls(
            input_dim=d["input_dim"],
            output_dim=d["output_dim"],
            embed_widths=tuple(d.get("embed_widths", (64, 64))),
            combine_widths=tuple(d.get("combine_widths", (64, 64))),
            process_widths=tuple(d.get("process_widths", (64,))),
            equivariant_agg=AggregationSpec.from_dict(d.get("equivariant_agg", {})),
            final_agg=AggregationSpec.from_dict(d.get("final_agg", {})),
            activation=d.get("activation", "tanh"),
        )


@dataclass
class DeepSetModel:
    arch: ModelArch
    embed: MlpParams
    combine: list[EquivariantLayerParams]
    aggregate: object
    process: MlpParams

    def parameters(self):
        """Stable (name, node) iteration over every learnable array."""
        yield from self.embed.parameters("embed.")
        for i, layer in enumerate(self.combine):
            yield from layer.parameters(f"combine.{i}.")
        yield from _aggregator_parameters(self.aggregate, "aggregate.")
        yield from self.process.parameters("process.")


def build_model(arch: ModelArch, rng: Rng) -> DeepSetModel:
    embed = init_mlp(rng.child("embed"), (arch.input_dim,) + arch.embed_widths,
                     arch.activation)
    combine = []
    k = arch.embedding_dim
    for i, k_out in enumerate(arch.combine_widths):
        combine.append(init_equivariant_layer(rng.child(f"combine{i}"), k, k_out,
                                              arch.equivariant_agg, arch.activation))
        k = k_out
    aggregator = build_aggregator(arch.final_agg, k, rng.child("final_agg"))
    process = init_mlp(rng.child("process"), (k,) + arch.process_widths + (arch.output_dim,),
                       arch.activation)
    return DeepSetModel(arch=arch, embed=embed, combine=combine,
                        aggregate=aggregator, process=process)


def embed_particles(model: DeepSetModel, population: Node) -> Node:
    """Apply the embedding MLP to every particle row independently."""
    return mlp_forward(model.embed, population)


def forward(model: DeepSetModel, population: Node) -> Node:
    """Population [.., n, d] to invariant output [.., output_dim]."""
    H = embed_particles(model, population)
    for layer in model.combine:
        H = equivariant_layer(layer, H)
    pooled = apply_aggregation(model.aggregate, H)
    return mlp_forward(model.process, pooled)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def serialize(model: DeepSetModel) -> str:
    """Versioned JSON blob: fingerprint header plus flat parameter arrays."""
    params = {}
    for name, node in model.parameters():
        params[name] = {"shape": list(node.shape),
                        "values": [float(v) for v in node.values.reshape(-1)]}
    blob = {"format": BLOB_FORMAT, "version": BLOB_VERSION,
            "arch": model.arch.to_dict(), "params": params}
    return json.dumps(blob)


def _parse_blob(blob: str) -> dict:
    try:
        data = json.loads(blob)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", exc.pos) from exc
    if not isinstance(data, dict):
        raise ParseError("blob is not an object")
    if data.get("format") != BLOB_FORMAT:
        raise ParseError(f"unexpected format tag {data.get('format')!r}")
    if data.get("version") != BLOB_VERSION:
        raise ParseError(f"unsupported blob version {data.get('version')!r}")
    if "arch" not in data or "params" not in data:
        raise ParseError("blob is missing the arch or params section")
    return data


def _install_params(model: DeepSetModel, stored: dict) -> None:
    names = dict(model.parameters())
    missing = set(names) - set(stored)
    extra = set(stored) - set(names)
    if missing or extra:
        raise ParseError(
            f"parameter names do not match architecture "
            f"(missing {sorted(missing)}, extra {sorted(extra)})"
        )
    for name, node in names.items():
        entry = stored[name]
        shape = tuple(entry["shape"])
        if shape != node.shape:
            raise ParseError(f"parameter {name} has shape {shape}, expected {node.shape}")
        node.values = np.asarray(entry["values"], dtype=np.float64).reshape(shape)


def deserialize(blob: str) -> DeepSetModel:
    """Rebuild a model from its blob; inverse of serialize, bitwise."""
    data = _parse_blob(blob)
    try:
        arch = ModelArch.from_dict(data["arch"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"bad architecture header: {exc}") from exc
    model = build_model(arch, Rng(0))
    _install_params(model, data["params"])
    return model


def load_parameters(model: DeepSetModel, blob: str) -> None:
    """Load a blob into an existing model; the fingerprints must agree."""
    data = _parse_blob(blob)
    if data["arch"] != model.arch.to_dict():
        raise ArchitectureMismatchError(
            "blob fingerprint does not match the target architecture"
        )
    _install_params(model, data["params"])
