"""Training objectives: balanced multi-domain cross-entropy and the ensemble
cosine diversity penalty."""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from . import tensor as T
from .errors import UsageError
from .tensor import Tensor

PROB_CLAMP = 1e-7


@dataclass
class LossBreakdown:
    ce: float
    cos: float
    total: float
    per_domain_ce: list[float] = field(default_factory=list)


def _check_balance(labels: np.ndarray, domain_ids: np.ndarray) -> tuple[list, int]:
    domains = list(dict.fromkeys(domain_ids.tolist()))
    counts = {d: (int(((domain_ids == d) & (labels == 1)).sum()),
                  int(((domain_ids == d) & (labels == 0)).sum())) for d in domains}
    per_class = {c for pair in counts.values() for c in pair}
    if len(per_class) != 1 or 0 in per_class:
        detail = ", ".join(f"{d}: live={lv} spoof={sp}" for d, (lv, sp) in counts.items())
        raise UsageError(f"unbalanced batch ({detail})")
    return domains, per_class.pop()


def balanced_ce(probs_live, labels, domain_ids) -> tuple[Tensor, np.ndarray]:
    """Cross-entropy over a balanced multi-domain batch.

    With ``B`` live and ``B`` spoof samples in each of the ``N + 1`` domain
    blocks (N sources plus the target few-shot block),

        L = -1 / (B (N + 1)) * sum over blocks and j of
            [log p_live(live_j) + log(1 - p_live(spoof_j))]

    Probabilities are clamped to ``[1e-7, 1 - 1e-7]`` before the log. Returns
    the scalar loss and the per-domain contributions (in order of first
    appearance), whose mean equals the loss.
    """
    probs = probs_live if isinstance(probs_live, Tensor) else Tensor(probs_live)
    labels = np.asarray(labels).astype(np.int64).reshape(-1)
    domain_ids = np.asarray(domain_ids).reshape(-1)
    if probs.shape != labels.shape or labels.shape != domain_ids.shape:
        raise UsageError(f"shape mismatch: probs {probs.shape}, labels {labels.shape}, domains {domain_ids.shape}")
    domains, b = _check_balance(labels, domain_ids)
    p = T.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    live = labels == 1
    # log p for live samples, log(1 - p) for spoof samples
    q = p * Tensor(np.where(live, 1.0, -1.0)) + Tensor(np.where(live, 0.0, 1.0))
    logq = T.log(q)
    loss = T.scale(T.reduce_sum(logq), -1.0 / (b * len(domains)))
    per_domain = np.array([-logq.data[domain_ids == d].sum() / b for d in domains], dtype=np.float64)
    return loss, per_domain


def cosine_sq_mean(a: Tensor, b: Tensor) -> Tensor:
    """Mean over tokens of the squared cosine similarity along the last axis.

    Token pairs where either vector has zero norm contribute 0.
    """
    dot = T.reduce_sum(a * b, axis=-1)
    den = T.reduce_sum(a * a, axis=-1) * T.reduce_sum(b * b, axis=-1)
    den = den + Tensor((den.data == 0).astype(den.data.dtype))
    return T.reduce_mean(dot * dot / den)


def module_cosine(outputs: list[Tensor]) -> Tensor:
    """Sum over unordered adapter pairs of the token-averaged squared cosine."""
    pairs = list(combinations(range(len(outputs)), 2))
    if not pairs:
        return Tensor(0.0)
    total = cosine_sq_mean(outputs[pairs[0][0]], outputs[pairs[0][1]])
    for i, j in pairs[1:]:
        total = total + cosine_sq_mean(outputs[i], outputs[j])
    return total


def cosine_diversity(modules: list[list[Tensor]]) -> Tensor:
    """Mean over ensemble modules of :func:`module_cosine`.

    ``modules`` holds, per ensemble module, the K cached adapter outputs. With
    K = 1 (or no modules) the loss is exactly 0.
    """
    values = [module_cosine(outs) for outs in modules if len(outs) >= 2]
    if not values:
        return Tensor(0.0)
    total = values[0]
    for v in values[1:]:
        total = total + v
    return T.scale(total, 1.0 / len(values))


def combine(stage: str, ce, cos, cos_weight: float = 1.0):
    """Stage objective: ``ce`` when pre-training, ``ce + w * cos`` when fine-tuning.

    Works on tensors and plain floats alike.
    """
    if stage == "pretrain":
        return ce
    if stage == "finetune":
        return ce + cos * cos_weight if cos_weight != 1.0 else ce + cos
    raise UsageError(f"unknown stage {stage!r}")


def stage_loss(stage: str, ce: float, cos: float, cos_weight: float = 1.0,
               per_domain_ce=None) -> LossBreakdown:
    total = combine(stage, float(ce), float(cos), cos_weight)
    return LossBreakdown(float(ce), float(cos), float(total),
                         [float(v) for v in (per_domain_ce if per_domain_ce is not None else [])])
