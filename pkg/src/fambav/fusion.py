"""Bipartite token fusion: even/odd split, cosine matching, averaging merge.

Patch tokens (everything except the class token at index 0) are split by
absolute index parity, every odd-index token proposes its most similar
even-index partner by cosine similarity, the r strongest proposals are
merged by averaging into the partner's slot, and survivors keep their
spatial order. Index 0 is never a candidate on either side.

Matching is a discrete selection and happens outside the gradient tape;
the merge itself is a constant row-averaging matrix applied with a
differentiable matmul, so gradients flow into every member of a group.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .errors import FusionError, PlanError
from .tensor import Tensor


@dataclass
class MatchResult:
    """r selected merge edges for one sequence.

    pairs: (index_a, index_b) absolute token indices, sorted by descending
    similarity (ties: lower a, then lower b). survivors: ascending absolute
    indices of the tokens still present after the merge (merged-into slots
    included).
    """

    pairs: list[tuple[int, int]]
    similarity: list[float]
    survivors: np.ndarray

    @property
    def r(self) -> int:
        return len(self.pairs)


def partition_even_odd(length: int) -> tuple[np.ndarray, np.ndarray]:
    """Split token indices 1..L-1 into (odd, even) absolute-index sets."""
    if length < 3:
        raise FusionError(f"need at least 3 tokens to form two sets, got {length}")
    set_a = np.arange(1, length, 2)
    set_b = np.arange(2, length, 2)
    return set_a, set_b


def cosine_similarity(values: np.ndarray, set_a: np.ndarray, set_b: np.ndarray) -> np.ndarray:
    """|A| x |B| cosine similarities (batched: leading axes pass through).

    Zero-norm tokens are treated as similar to nothing (similarity 0).
    """
    norms = np.linalg.norm(values, axis=-1, keepdims=True)
    safe = np.where(norms == 0.0, 1.0, norms)
    unit = values / safe
    a = unit[..., set_a, :]
    b = unit[..., set_b, :]
    return a @ np.swapaxes(b, -1, -2)


def match_pairs(sim: np.ndarray, r: int, set_a: np.ndarray | None = None,
                set_b: np.ndarray | None = None) -> MatchResult:
    """Pick the r strongest A->B proposals from a similarity matrix.

    Each A token proposes its best B token (ties: lower B index); the r
    highest-similarity proposals win (ties: lower A index). Several A
    tokens may land on the same B token, forming groups larger than two.
    """
    n_a, n_b = sim.shape
    if set_a is None or set_b is None:
        length = n_a + n_b + 1
        set_a, set_b = partition_even_odd(length)
    if r > n_a:
        raise PlanError(f"cannot fuse {r} pairs with only {n_a} proposers")
    length = n_a + n_b + 1
    best_pos = np.argmax(sim, axis=1)  # first max = lowest B index
    best_sim = sim[np.arange(n_a), best_pos]
    # Stable sort on descending similarity keeps the lower-A-index tie-break.
    order = np.argsort(-best_sim, kind="stable")
    chosen = order[:r]
    pairs = [(int(set_a[i]), int(set_b[best_pos[i]])) for i in chosen]
    sims = [float(best_sim[i]) for i in chosen]
    alive = np.ones(length, dtype=bool)
    alive[set_a[chosen]] = False
    survivors = np.nonzero(alive)[0]
    return MatchResult(pairs=pairs, similarity=sims, survivors=survivors)


def _row_assignment(match: MatchResult, length: int) -> np.ndarray:
    """Output row index for every input token (merged A tokens land on
    their partner's row)."""
    row_of = np.full(length, -1, dtype=np.int64)
    row_of[match.survivors] = np.arange(len(match.survivors))
    rows = row_of.copy()
    for a, b in match.pairs:
        rows[a] = row_of[b]
    return rows


def averaging_matrix(match: MatchResult, length: int, sizes: np.ndarray | None = None,
                     dtype=np.float64) -> tuple[np.ndarray, np.ndarray]:
    """Row-averaging matrix M of shape (length - r, length) plus new sizes.

    Row k of M averages the merge group whose representative slot is
    match.survivors[k]; unmerged rows are one-hot. With `sizes` given the
    mean is weighted by token multiplicities, otherwise it is unweighted.
    """
    weights = np.ones(length) if sizes is None else np.asarray(sizes, dtype=np.float64)
    rows = _row_assignment(match, length)
    n_out = len(match.survivors)
    totals = np.bincount(rows, weights=weights, minlength=n_out)
    m = np.zeros((n_out, length), dtype=dtype)
    m[rows, np.arange(length)] = weights / totals[rows]
    return m, totals


def fuse(values: Tensor, matches: list[MatchResult] | MatchResult,
         sizes: np.ndarray | None = None, weighted: bool = False,
         ) -> tuple[Tensor, np.ndarray]:
    """Apply merges to a (B, L, D) sequence; returns (B, L-r, D) and sizes.

    `matches` holds one MatchResult per batch element (a single result is
    broadcast). Unweighted averaging is the default; pass weighted=True to
    take multiplicity-weighted means instead.
    """
    if isinstance(matches, MatchResult):
        matches = [matches] * values.shape[0]
    bsz, length, _ = values.shape
    if len(matches) != bsz:
        raise FusionError(f"got {len(matches)} match results for batch {bsz}")
    r = matches[0].r
    if any(m.r != r for m in matches):
        raise FusionError("all batch elements must fuse the same number of pairs")
    if r == 0:
        return values, (sizes if sizes is not None else np.ones((bsz, length)))
    if sizes is None:
        sizes = np.ones((bsz, length))
    mats = np.empty((bsz, length - r, length), dtype=values.data.dtype)
    new_sizes = np.empty((bsz, length - r))
    for i, match in enumerate(matches):
        mats[i], _ = averaging_matrix(
            match, length, sizes=sizes[i] if weighted else None,
            dtype=values.data.dtype)
        # Multiplicities always track total group mass, weighted or not.
        rows = _row_assignment(match, length)
        new_sizes[i] = np.bincount(rows, weights=sizes[i], minlength=length - r)
    return tn.matmul(Tensor(mats), values), new_sizes


def fuse_layer(values: Tensor, r: int, sizes: np.ndarray | None = None,
               weighted: bool = False, trace: list | None = None,
               layer_index: int = 0) -> tuple[Tensor, np.ndarray, list[MatchResult]]:
    """Per-layer entry point: partition, match, and merge r pairs.

    Returns the fused values, per-token multiplicities, and the per-batch
    match results. When `trace` is a list, one (layer, index_a, index_b,
    similarity) record per merge edge is appended, batch-major.
    """
    bsz, length, _ = values.shape
    if r == 0:
        return values, (sizes if sizes is not None else np.ones((bsz, length))), [
            MatchResult([], [], np.arange(length))] * bsz
    set_a, set_b = partition_even_odd(length)
    if r > min(len(set_a), len(set_b)):
        raise PlanError(f"r={r} exceeds bipartite capacity {min(len(set_a), len(set_b))} "
                        f"at length {length}")
    sim = cosine_similarity(values.data, set_a, set_b)
    matches = [match_pairs(sim[i], r, set_a, set_b) for i in range(bsz)]
    if trace is not None:
        for match in matches:
            for (a, b), s in zip(match.pairs, match.similarity):
                trace.append((layer_index, a, b, s))
    fused, new_sizes = fuse(values, matches, sizes=sizes, weighted=weighted)
    return fused, new_sizes, matches
