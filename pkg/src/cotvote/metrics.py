"""Evaluation metrics: ROUGE-L, bias-variance decomposition, Jensen gap.

Pure functions over numpy arrays / token lists; nothing here touches the
autodiff graph, so these double as independent checks on the training
path.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

# rationales scoring at or above this F-score count as "good" in the
# four-way rationale/answer breakdown
GOOD_RATIONALE_ROUGE = 0.9

CATEGORY_NAMES = (
    "good_rationale_good_answer",
    "good_rationale_bad_answer",
    "bad_rationale_good_answer",
    "bad_rationale_bad_answer",
)


def lcs_length(a, b) -> int:
    """Length of the longest common subsequence of two token sequences."""
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            if x == y:
                cur.append(prev[j - 1] + 1)
            else:
                cur.append(max(prev[j], cur[j - 1]))
        prev = cur
    return prev[len(b)]


def rouge_l(candidate, reference) -> float:
    """LCS-based F1: P = LCS/|cand|, R = LCS/|ref|, F = 2PR/(P+R).

    Returns 0.0 for an empty candidate or when there is no common
    subsequence. The reference must be non-empty.
    """
    reference = list(reference)
    candidate = list(candidate)
    if not reference:
        raise ValueError("rouge_l: reference sequence is empty")
    if not candidate:
        return 0.0
    lcs = lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    p = lcs / len(candidate)
    r = lcs / len(reference)
    return 2.0 * p * r / (p + r)


def bias_variance_decompose(predictions, truth: float) -> tuple[float, float, float, float]:
    """Split mean squared error of repeated predictions around `truth`.

    Returns (bias_sq, variance, residual, mse) with population variance
    (divisor N), under which bias_sq + variance == mse and the residual
    is identically ~0; it is kept as the explicit remainder term.
    """
    preds = np.asarray(predictions, dtype=np.float64)
    if preds.ndim != 1 or preds.size < 2:
        raise ValueError(f"need >= 2 scalar predictions, got shape {preds.shape}")
    mean = preds.mean()
    bias_sq = float((mean - truth) ** 2)
    variance = float(((preds - mean) ** 2).mean())
    mse = float(((preds - truth) ** 2).mean())
    residual = mse - bias_sq - variance
    return bias_sq, variance, residual, mse


def softmax_ce(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Stabilized cross-entropy per position: logits (..., V), targets (...,)."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    m = logits.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(logits - m).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(logits, targets[..., None], axis=-1)
    return (lse - picked)[..., 0]


def jensen_gap(stack, targets) -> float:
    """Mean per-sample CE minus CE of the mean logits, averaged over
    valid positions. Non-negative up to rounding, by convexity of
    cross-entropy in the logits.

    `stack` may be an (N, L, V) array or any object with `.samples`
    (and optionally `.mask`).
    """
    samples = getattr(stack, "samples", stack)
    samples = np.asarray(getattr(samples, "data", samples), dtype=np.float64)
    mask = getattr(stack, "mask", None)
    targets = np.asarray(targets, dtype=np.int64)
    n = samples.shape[0]
    if n == 1:
        return 0.0
    per_sample = softmax_ce(samples, np.broadcast_to(targets, (n,) + targets.shape))
    ce_of_mean = softmax_ce(samples.mean(axis=0), targets)
    gaps = per_sample.mean(axis=0) - ce_of_mean
    if mask is not None:
        gaps = gaps[np.asarray(mask, dtype=bool)]
    return float(gaps.mean())


@dataclass
class EvalReport:
    """Aggregate evaluation of one trained pipeline on one split."""

    test_accuracy: float
    rouge_l: float
    bias_sq: float
    variance: float
    residual: float
    jensen_gap: float
    categories: dict = field(default_factory=dict)
    per_mode: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)
