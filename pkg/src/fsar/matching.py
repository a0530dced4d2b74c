"""Pairwise video similarity from compound prototypes.

Global prototypes are compared index-to-index and averaged; focused
prototypes are first aligned by an exact maximum-similarity bipartite
assignment (Hungarian algorithm), then averaged over the matched pairs.
The fused score is a weighted sum of the two terms.

The assignment itself is treated as a constant of the forward pass:
gradients flow through the cosine values of the selected pairs only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fsar.decoder import VideoPrototypes
from fsar.errors import ContractError
from fsar.tensor import (
    Tensor,
    add,
    gather,
    mean_all,
    pairwise_cosine,
    scale,
    take_diagonal,
)


def _min_assignment(cost: np.ndarray) -> np.ndarray:
    """Column-for-row assignment minimizing total cost, O(n^3) potentials method."""
    n = cost.shape[0]
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    match_row = np.zeros(n + 1, dtype=np.intp)  # row currently matched to column j (0 = free)
    way = np.zeros(n + 1, dtype=np.intp)
    for i in range(1, n + 1):
        match_row[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match_row[j0]
            free = ~used[1:]
            reduced = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (reduced < minv[1:])
            if better.any():
                idx = np.nonzero(better)[0]
                minv[idx + 1] = reduced[idx]
                way[idx + 1] = j0
            free_idx = np.nonzero(free)[0] + 1
            j1 = free_idx[np.argmin(minv[free_idx])]
            delta = minv[j1]
            u[match_row[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if match_row[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match_row[j0] = match_row[j1]
            j0 = j1
    col_for_row = np.zeros(n, dtype=np.intp)
    for j in range(1, n + 1):
        col_for_row[match_row[j] - 1] = j - 1
    return col_for_row


def hungarian_max(scores: np.ndarray) -> tuple[np.ndarray, float]:
    """Permutation sigma maximizing sum_k scores[k, sigma(k)], plus that total.

    Maximization runs as minimization of (max(scores) - scores), which is
    exact for finite inputs. Ties resolve deterministically (lowest index
    first in the scan order).
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] != scores.shape[1]:
        raise ContractError(f"hungarian_max needs a square matrix, got {scores.shape}")
    if not np.all(np.isfinite(scores)):
        raise ContractError("hungarian_max needs finite entries")
    m = scores.shape[0]
    if m == 0:
        return np.zeros(0, dtype=np.intp), 0.0
    perm = _min_assignment(scores.max() - scores)
    total = float(scores[np.arange(m), perm].sum())
    return perm, total


@dataclass
class SimilarityBreakdown:
    """Similarity between two videos, with both terms and the alignment kept.

    ``fused`` stays a graph node so training can differentiate through it;
    the per-pair arrays are plain values for reporting.
    """

    fused: Tensor
    global_term: float
    focused_term: float
    assignment: np.ndarray | None
    global_pairs: np.ndarray
    focused_pairs: np.ndarray
    lambda_global: float
    lambda_focused: float

    @property
    def value(self) -> float:
        return self.fused.item()

    def to_dict(self) -> dict:
        return {
            "fused_score": self.value,
            "global_score": self.global_term,
            "focused_score": self.focused_term,
            "lambda_global": self.lambda_global,
            "lambda_focused": self.lambda_focused,
            "focused_assignment": None if self.assignment is None else self.assignment.tolist(),
            "global_pair_scores": self.global_pairs.tolist(),
            "focused_pair_scores": self.focused_pairs.tolist(),
        }


def global_score(a: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """Mean cosine of index-aligned prototype pairs: (mean, per-pair column)."""
    if a.shape != b.shape:
        raise ContractError(f"global prototype sets differ in shape: {a.shape} vs {b.shape}")
    if a.shape[0] < 1:
        raise ContractError("global_score needs at least one prototype")
    pairs = take_diagonal(pairwise_cosine(a, b))
    return mean_all(pairs), pairs


def focused_score(a: Tensor, b: Tensor) -> tuple[Tensor, np.ndarray, Tensor]:
    """Mean cosine over the optimal assignment: (mean, sigma, matched column)."""
    if a.shape != b.shape:
        raise ContractError(f"focused prototype sets differ in shape: {a.shape} vs {b.shape}")
    m = a.shape[0]
    if m < 1:
        raise ContractError("focused_score needs at least one prototype")
    cos = pairwise_cosine(a, b)
    perm, _ = hungarian_max(cos.data)
    pairs = gather(cos, np.arange(m), perm)
    return mean_all(pairs), perm, pairs


def video_similarity(
    a: VideoPrototypes,
    b: VideoPrototypes,
    lambda_global: float,
    lambda_focused: float,
) -> SimilarityBreakdown:
    """Fused similarity lambda_g * s_global + lambda_f * s_focused."""
    if a.num_global != b.num_global or a.num_focused != b.num_focused:
        raise ContractError(
            f"prototype counts differ: ({a.num_global},{a.num_focused}) vs "
            f"({b.num_global},{b.num_focused})"
        )
    terms = []
    g_pairs = np.zeros(0)
    f_pairs = np.zeros(0)
    g_term = 0.0
    f_term = 0.0
    perm = None
    if a.num_global > 0:
        sg, pairs = global_score(a.global_protos, b.global_protos)
        g_term = sg.item()
        g_pairs = pairs.data[:, 0].copy()
        terms.append(scale(sg, lambda_global))
    if a.num_focused > 0:
        sf, perm, pairs = focused_score(a.focused_protos, b.focused_protos)
        f_term = sf.item()
        f_pairs = pairs.data[:, 0].copy()
        terms.append(scale(sf, lambda_focused))
    fused = terms[0] if len(terms) == 1 else add(terms[0], terms[1])
    return SimilarityBreakdown(
        fused=fused,
        global_term=g_term,
        focused_term=f_term,
        assignment=perm,
        global_pairs=g_pairs,
        focused_pairs=f_pairs,
        lambda_global=lambda_global,
        lambda_focused=lambda_focused,
    )
