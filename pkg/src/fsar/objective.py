"""Training losses: episodic cross-entropy plus two prototype regularizers.

The diversity loss sums cosine similarity over unordered pairs of global
prototypes; the attention-divergence loss does the same over the focused
prototypes' attention rows. Both are minimized, pushing the global group to
cover different aspects of a video and the focused group to look at
different temporal regions. Pair sums run over i < j (half the ordered
sum), which only rescales the loss weights.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from fsar.decoder import VideoPrototypes
from fsar.errors import ContractError
from fsar.matching import video_similarity
from fsar.tensor import (
    Tensor,
    add,
    concat_cols,
    concat_rows,
    gather,
    log_softmax_rows,
    maximum,
    mean_all,
    mul,
    neg,
    pairwise_cosine,
    scale,
    sum_all,
)


@dataclass
class LossWeights:
    cross_entropy: float = 1.0
    diversity: float = 0.1
    attention: float = 0.1


def _pair_sum(rows: Tensor) -> Tensor:
    """Sum of pairwise row cosines over unordered pairs i < j."""
    m = rows.shape[0]
    if m < 2:
        return Tensor(np.zeros((1, 1), dtype=rows.dtype))
    cos = pairwise_cosine(rows, rows)
    mask = Tensor(np.triu(np.ones((m, m), dtype=rows.dtype), k=1))
    return sum_all(mul(cos, mask))


def diversity_loss(global_protos: Tensor) -> Tensor:
    """Pairwise cosine sum among global prototypes (0 for a single prototype)."""
    if global_protos.shape[0] < 1:
        raise ContractError("diversity_loss needs at least one prototype")
    return _pair_sum(global_protos)


def attention_divergence_loss(focused_attn: Tensor) -> Tensor:
    """Pairwise cosine sum among focused-prototype attention rows."""
    if focused_attn.shape[0] < 1:
        raise ContractError("attention_divergence_loss needs at least one attention row")
    return _pair_sum(focused_attn)


def class_logits(
    query: VideoPrototypes,
    support_by_class: Sequence[Sequence[VideoPrototypes]],
    lambda_global: float,
    lambda_focused: float,
    aggregation: str = "mean",
) -> Tensor:
    """Per-class logits for one query: aggregated fused similarity to each shot.

    Returns a 1 x C row; ``aggregation`` is "mean" or "max" over the K shots
    of a class.
    """
    if len(support_by_class) < 2:
        raise ContractError("class_logits needs at least 2 classes")
    if aggregation not in ("mean", "max"):
        raise ContractError(f"unknown aggregation {aggregation!r}")
    per_class = []
    for shots in support_by_class:
        if not shots:
            raise ContractError("class_logits: empty support class")
        sims = [video_similarity(query, s, lambda_global, lambda_focused).fused for s in shots]
        if aggregation == "mean":
            total = sims[0]
            for s in sims[1:]:
                total = add(total, s)
            per_class.append(scale(total, 1.0 / len(sims)))
        else:
            best = sims[0]
            for s in sims[1:]:
                best = maximum(best, s)
            per_class.append(best)
    return concat_cols(per_class)


def cross_entropy(logits: Tensor, labels: Sequence[int], temperature: float = 1.0) -> Tensor:
    """Mean negative log-likelihood of the true classes, logits scaled by 1/temperature."""
    n, c = logits.shape
    labels = np.asarray(labels, dtype=np.intp)
    if labels.shape != (n,):
        raise ContractError(f"labels shape {labels.shape} does not match {n} logit rows")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ContractError("labels out of range")
    log_probs = log_softmax_rows(scale(logits, 1.0 / temperature))
    picked = gather(log_probs, np.arange(n), labels)
    return neg(mean_all(picked))


def total_loss(
    logits: Tensor,
    labels: Sequence[int],
    prototypes: Sequence[VideoPrototypes],
    weights: LossWeights,
    temperature: float = 1.0,
) -> tuple[Tensor, dict[str, float]]:
    """Weighted sum of cross-entropy and the two regularizers.

    The regularizers are averaged over every video in the episode (support
    and query alike). Returns the scalar loss node plus the unweighted parts
    for logging.
    """
    ce = cross_entropy(logits, labels, temperature)
    loss = scale(ce, weights.cross_entropy)
    parts = {"cross_entropy": ce.item(), "diversity": 0.0, "attention": 0.0}
    if prototypes:
        div_terms = [diversity_loss(p.global_protos) for p in prototypes if p.num_global > 0]
        att_terms = [attention_divergence_loss(p.focused_attn) for p in prototypes if p.num_focused > 0]
        if div_terms:
            div = scale(concat_sum(div_terms), 1.0 / len(div_terms))
            parts["diversity"] = div.item()
            loss = add(loss, scale(div, weights.diversity))
        if att_terms:
            att = scale(concat_sum(att_terms), 1.0 / len(att_terms))
            parts["attention"] = att.item()
            loss = add(loss, scale(att, weights.attention))
    return loss, parts


def concat_sum(scalars: Sequence[Tensor]) -> Tensor:
    """Sum of 1x1 tensors as a single graph node chain."""
    if len(scalars) == 1:
        return scalars[0]
    return sum_all(concat_rows(list(scalars)))
