"""Token-DAG text head: transition/emission tables, marginal NLL, decoding.

Each region's K refined text slots become the vertices of a directed acyclic
graph: attention-style scores between slots give forward-only transition
probabilities, and a linear head gives per-vertex token distributions. The
training loss marginalizes a target token sequence over every strictly
increasing vertex path from the first to the last vertex; decoding finds the
best path either exactly (dynamic programming) or greedily.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .numcore import ConfigError, DiffArray, LinearParams

END_ID = 1  # reserved end-marker token id (see synthdata.EOS_ID)


class TargetLengthError(ValueError):
    """Target sequence cannot be laid out on the K-vertex graph."""


@dataclass
class DagHeadParams:
    w_query: DiffArray  # (d, d)
    w_key: DiffArray  # (d, d)
    emit: LinearParams  # (d, vocab)

    @staticmethod
    def create(rng, d, vocab_size, dtype=np.float32):
        return DagHeadParams(
            w_query=nc.xavier_uniform(rng, d, d, dtype=dtype),
            w_key=nc.xavier_uniform(rng, d, d, dtype=dtype),
            emit=LinearParams.create(rng, d, vocab_size, dtype=dtype),
        )


@dataclass
class TokenDAG:
    """Per-region token graph.

    ``transitions`` is strictly upper-triangular and row-stochastic on rows
    0..K-2; the last row has no successors and is all zeros. ``emissions``
    rows are probability distributions over the vocabulary. The log-domain
    twins drive the loss and the decoders.
    """

    transitions: DiffArray  # (K, K)
    emissions: DiffArray  # (K, vocab)
    log_transitions: DiffArray
    log_emissions: DiffArray

    @property
    def num_vertices(self):
        return self.transitions.data.shape[0]


@dataclass
class NamePrediction:
    """A decoded name: vertex path (0-based, first to last vertex), the
    emitted token ids after end-marker stripping and consecutive-duplicate
    collapsing, and the joint log-score of path + per-vertex best tokens."""

    token_ids: tuple
    path: tuple
    log_score: float


def transition_mask(k, dtype=np.float64):
    """Additive mask keeping only forward edges j > i; row K-1 is fully
    masked (no successors)."""
    mask = np.full((k, k), -np.inf, dtype=dtype)
    upper = np.triu_indices(k, k=1)
    mask[upper] = 0.0
    return mask


def dag_log_tables(text, params):
    """Log transition and emission tables for (..., K, d) text slots.

    Scores are scaled dot products of learned query/key projections of the
    slots, masked to strictly-upper-triangular support and row-normalized
    in log space. Returns (log_transitions (..., K, K),
    log_emissions (..., K, vocab)).
    """
    k = text.data.shape[-2]
    d = text.data.shape[-1]
    if k < 2:
        raise ConfigError("a token DAG needs at least 2 vertices")
    q = nc.matmul(text, params.w_query)
    key = nc.matmul(text, params.w_key)
    ndim = text.data.ndim
    swap = tuple(range(ndim - 2)) + (ndim - 1, ndim - 2)
    scores = nc.matmul(q, nc.transpose(key, swap)) * (1.0 / math.sqrt(d))
    mask = transition_mask(k, dtype=text.data.dtype)
    log_tr = nc.log_softmax(scores, axis=-1, mask=mask)
    log_em = nc.log_softmax(params.emit(text), axis=-1)
    return log_tr, log_em


def build_dag(text_region, params):
    """Build the token DAG for one region's (K, d) text slots."""
    log_tr, log_em = dag_log_tables(text_region, params)
    return TokenDAG(
        transitions=nc.exp(log_tr),
        emissions=nc.exp(log_em),
        log_transitions=log_tr,
        log_emissions=log_em,
    )


def build_dags(text, params):
    """Build one TokenDAG per region from batched (N, K, d) text slots."""
    log_tr, log_em = dag_log_tables(text, params)
    tr = nc.exp(log_tr)
    em = nc.exp(log_em)
    return [
        TokenDAG(
            transitions=tr[n],
            emissions=em[n],
            log_transitions=log_tr[n],
            log_emissions=log_em[n],
        )
        for n in range(text.data.shape[0])
    ]


def dag_nll(dag, target):
    """Negative log marginal likelihood of ``target`` over all legal paths.

    ``target`` is the token sequence ending in the end marker, length m with
    2 <= m <= K. Paths are strictly increasing vertex sequences pinned to
    start at vertex 0 and end at vertex K-1; the forward recursion runs in
    log space over (position, vertex) and is differentiable end to end.
    """
    k = dag.num_vertices
    m = len(target)
    if m < 2:
        raise TargetLengthError(f"target of length {m} is too short (need >= 2)")
    if m > k:
        raise TargetLengthError(f"target of length {m} exceeds the {k}-vertex graph")
    log_tr = dag.log_transitions
    log_em = dag.log_emissions
    dtype = log_em.data.dtype
    start = np.full(k, -np.inf, dtype=dtype)
    start[0] = 0.0
    alpha = log_em[:, int(target[0])] + start
    for t in range(1, m):
        hop = nc.logsumexp(nc.reshape(alpha, (k, 1)) + log_tr, axis=0)
        alpha = hop + log_em[:, int(target[t])]
    return -alpha[k - 1]


def _path_score(vertex_best, log_tr_data, path):
    """Score of one path, accumulated right-to-left exactly like the DP."""
    score = vertex_best[path[-1]]
    for t in range(len(path) - 2, -1, -1):
        score = vertex_best[path[t]] + (log_tr_data[path[t], path[t + 1]] + score)
    return score


def _emit_tokens(log_em_data, path, end_id):
    """Per-vertex argmax tokens along the path, end markers stripped, then
    consecutive duplicates collapsed."""
    raw = [int(np.argmax(log_em_data[v])) for v in path]
    kept = [t for t in raw if t != end_id]
    out = []
    for t in kept:
        if not out or out[-1] != t:
            out.append(t)
    return tuple(out)


def viterbi_decode(dag, end_id=END_ID):
    """Best path from vertex 0 to K-1 under per-vertex best emissions plus
    transition scores; score ties prefer the smaller next vertex."""
    log_tr = dag.log_transitions.data
    log_em = dag.log_emissions.data
    k = dag.num_vertices
    vertex_best = log_em.max(axis=1)
    best_from = np.empty(k)
    next_hop = np.full(k, -1, dtype=int)
    best_from[k - 1] = vertex_best[k - 1]
    for v in range(k - 2, -1, -1):
        cand = log_tr[v, v + 1 :] + best_from[v + 1 :]
        j = int(np.argmax(cand))
        best_from[v] = vertex_best[v] + cand[j]
        next_hop[v] = v + 1 + j
    path = [0]
    while path[-1] != k - 1:
        path.append(int(next_hop[path[-1]]))
    return NamePrediction(
        token_ids=_emit_tokens(log_em, path, end_id),
        path=tuple(path),
        log_score=float(best_from[0]),
    )


def greedy_decode(dag, end_id=END_ID):
    """Hop along locally best transitions from vertex 0 until the last
    vertex; same emission and scoring rules as the exact decoder."""
    tr = dag.transitions.data
    log_tr = dag.log_transitions.data
    log_em = dag.log_emissions.data
    k = dag.num_vertices
    path = [0]
    while path[-1] != k - 1:
        path.append(int(np.argmax(tr[path[-1]])))
    vertex_best = log_em.max(axis=1)
    return NamePrediction(
        token_ids=_emit_tokens(log_em, path, end_id),
        path=tuple(path),
        log_score=float(_path_score(vertex_best, log_tr, path)),
    )
