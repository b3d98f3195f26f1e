"""Learnable aggregation functions: attention with a single query, and the
recurrent variant where a gated cell refines the query over several steps
and a second cell post-processes the step results in reverse order.

Invariance comes for free: attention logits are equivariant in the particle
axis, softmax normalization is equivariant, and the weighted reducer is
invariant, so every composition here is an invariant function of the
population.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .aggregations import EmptyPopulationError, SimpleAggregation, aggregate_weighted
from .autodiff import Node, Rng


def glorot(rng: Rng, rows: int, cols: int) -> Node:
    """Weight matrix drawn uniform in +-sqrt(6 / (fan_in + fan_out))."""
    limit = math.sqrt(6.0 / (rows + cols))
    w = rng.uniform((rows, cols), -limit, limit)
    return ad.parameter(w.values)


@dataclass
class LstmParams:
    """One gated recurrent cell: weight over [input; hidden], bias over the
    four gates (input, forget, cell, output), forget bias initialized to 1.
    """

    weight: Node  # [(k_in + k_hidden) x 4 k_hidden]
    bias: Node    # [4 k_hidden]
    hidden: int

    def parameters(self, prefix: str = ""):
        yield prefix + "weight", self.weight
        yield prefix + "bias", self.bias


def init_lstm(rng: Rng, k_in: int, k_hidden: int) -> LstmParams:
    weight = glorot(rng, k_in + k_hidden, 4 * k_hidden)
    bias = ad.parameter([0.0] * 4 * k_hidden)
    bias.values[k_hidden:2 * k_hidden] = 1.0  # forget gate starts open
    return LstmParams(weight=weight, bias=bias, hidden=k_hidden)


def lstm_step(cell: LstmParams, x: Node, h: Node, c: Node):
    """Advance the cell one step; works on [k] vectors or [B, k] batches."""
    k = cell.hidden
    z = ad.matmul(ad.concat([x, h], axis=-1), cell.weight)
    z = ad.add(z, ad.broadcast_to(cell.bias, z.shape))
    i = ad.sigmoid(ad.slice_axis(z, -1, 0, k))
    f = ad.sigmoid(ad.slice_axis(z, -1, k, 2 * k))
    g = ad.tanh(ad.slice_axis(z, -1, 2 * k, 3 * k))
    o = ad.sigmoid(ad.slice_axis(z, -1, 3 * k, 4 * k))
    c_new = ad.add(ad.mul(f, c), ad.mul(i, g))
    h_new = ad.mul(o, ad.tanh(c_new))
    return h_new, c_new


@dataclass
class QueryAggregationParams:
    """Attention with a single learnable query vector over the embeddings."""

    q1: Node
    base: SimpleAggregation = field(default_factory=lambda: SimpleAggregation("sum"))

    def parameters(self, prefix: str = ""):
        yield prefix + "q1", self.q1


@dataclass
class RecurrentAggregationParams:
    """T attention steps driven by a query cell, post-processed in reverse.

    `backward` selects the post-processing: "lstm" feeds the step results
    r_T, ..., r_1 through the backward cell and returns its final hidden
    state; "last" simply returns r_T (useful as a degenerate baseline).
    """

    q1: Node
    steps: int
    query_cell: LstmParams
    base: SimpleAggregation
    backward: str = "lstm"
    backward_cell: LstmParams | None = None

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.backward not in ("lstm", "last"):
            raise ValueError(f"unknown backward mode {self.backward!r}")
        if self.backward == "lstm" and self.backward_cell is None:
            raise ValueError("backward='lstm' needs a backward_cell")

    def parameters(self, prefix: str = ""):
        yield prefix + "q1", self.q1
        yield from self.query_cell.parameters(prefix + "query_cell.")
        if self.backward_cell is not None:
            yield from self.backward_cell.parameters(prefix + "backward_cell.")


def init_query_aggregation(k: int, base: SimpleAggregation | None = None) -> QueryAggregationParams:
    q1 = ad.parameter([0.0] * k)
    return QueryAggregationParams(q1=q1, base=base or SimpleAggregation("sum"))


def init_recurrent_aggregation(rng: Rng, k: int, steps: int = 3,
                               base: SimpleAggregation | None = None,
                               backward: str = "lstm") -> RecurrentAggregationParams:
    q1 = ad.parameter([0.0] * k)
    query_cell = init_lstm(rng.child("query_cell"), k, k)
    backward_cell = init_lstm(rng.child("backward_cell"), k, k) if backward == "lstm" else None
    return RecurrentAggregationParams(q1=q1, steps=steps, query_cell=query_cell,
                                      base=base or SimpleAggregation("sum"),
                                      backward=backward, backward_cell=backward_cell)


def attention_logits(embeddings: Node, query: Node) -> Node:
    """Per-particle dot products e_i . q; equivariant in the particle axis.

    Accepts embeddings [.., n, k] with query [k] or a per-population query
    [B, k] against [B, n, k].
    """
    if query.ndim == 1:
        return ad.matmul(embeddings, query)
    if embeddings.ndim != 3 or query.shape != (embeddings.shape[0], embeddings.shape[-1]):
        raise ad.ShapeMismatchError(
            f"attention: query {query.shape} does not match embeddings {embeddings.shape}"
        )
    # batched dot: scale rows by the query and sum the feature axis
    q_rows = ad.broadcast_row(query, embeddings.shape[-2])
    return ad.reduce_sum(ad.mul(embeddings, q_rows), -1)


def normalize(logits: Node) -> Node:
    """Softmax over the particle axis; equivariant, sums to one."""
    return ad.softmax(logits, -1)


def _lead_zeros(embeddings: Node, k: int) -> Node:
    return ad.constant(np.zeros(embeddings.shape[:-2] + (k,)))


def _spread_query(q1: Node, embeddings: Node) -> Node:
    """Broadcast the shared query to one copy per population in a batch."""
    if embeddings.ndim == 2:
        return q1
    return ad.broadcast_to(q1, (embeddings.shape[0], q1.shape[0]))


def _check_population(embeddings: Node) -> None:
    if embeddings.ndim < 2 or embeddings.shape[-2] == 0:
        raise EmptyPopulationError("attention over an empty population")


def query_aggregate(params: QueryAggregationParams, embeddings: Node) -> Node:
    """Single-query attention: weights softmax(E q1), then the base reducer
    over the weighted rows."""
    _check_population(embeddings)
    q = _spread_query(params.q1, embeddings)
    weights = normalize(attention_logits(embeddings, q))
    return aggregate_weighted(params.base, weights, embeddings)


def recurrent_aggregate(params: RecurrentAggregationParams, embeddings: Node) -> Node:
    out, _, _ = recurrent_aggregate_trace(params, embeddings)
    return out


def recurrent_aggregate_trace(params: RecurrentAggregationParams, embeddings: Node):
    """Run the full recurrence and also return the per-step queries and
    results (useful for sensitivity analysis).

    Step 1 attends with the learnable initial query; steps 2..T refine the
    query from the previous step's result through the query cell. The
    backward pass then consumes r_T, ..., r_1 and its final hidden state is
    the aggregation result.
    """
    _check_population(embeddings)
    k = params.q1.shape[0]
    q = _spread_query(params.q1, embeddings)
    c_q = _lead_zeros(embeddings, k)
    r = _lead_zeros(embeddings, k)
    queries, results = [], []
    for t in range(params.steps):
        if t > 0:
            q, c_q = lstm_step(params.query_cell, r, q, c_q)
        weights = normalize(attention_logits(embeddings, q))
        r = aggregate_weighted(params.base, weights, embeddings)
        queries.append(q)
        results.append(r)
    if params.backward == "last":
        return results[-1], queries, results
    h = _lead_zeros(embeddings, k)
    c = _lead_zeros(embeddings, k)
    for r_t in reversed(results):
        h, c = lstm_step(params.backward_cell, r_t, h, c)
    return h, queries, results
