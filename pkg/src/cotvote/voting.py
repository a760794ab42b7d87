"""Logit-voting kernel: aggregate N dropout-sampled logit sets into one.

Per sequence position (positions vote independently), the kernel
computes over the sample axis:

    mean_v     = (1/N) sum_i L[i]_v
    std_v      = std over samples (sample std by default, divisor N-1)
    weights_v  = 1 / (1 + std_v)
    weighted_v = weights_v * sum_i L[i]_v / sum_v' weights_v'
    final_v    = alpha * mean_v + (1 - alpha) * weighted_v

Two variants of the weighted branch exist in the wild: the executable
pseudocode form above, and a normalized form carrying an extra 1/N
factor. They genuinely differ, so both are implemented and selectable;
`appendix_pseudocode` is the default. N == 1 bypasses the vote entirely
(final is the input sample, bit for bit), which also makes single-sample
training exactly equal to plain cross-entropy training.

Everything is differentiable end to end: gradients flow into every
sample, including through the standard-deviation path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, NumericError
from .metrics import rouge_l
from .tensor import Tensor

VARIANTS = ("appendix_pseudocode", "eq9_normalized")
STD_MODES = ("unbiased", "population")
RATIONALE_DECODES = ("logit_argmax", "token_majority")


@dataclass(frozen=True)
class VoteConfig:
    """Hyperparameters of the voting kernel and its two sampling stages."""

    n_rationale_samples: int = 4
    n_answer_samples: int = 4
    alpha: float = 0.5
    variant: str = "appendix_pseudocode"
    std_mode: str = "unbiased"
    rationale_decode: str = "logit_argmax"

    def __post_init__(self):
        if self.n_rationale_samples < 1 or self.n_answer_samples < 1:
            raise ConfigError("sample counts must be >= 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.std_mode not in STD_MODES:
            raise ConfigError(f"unknown std_mode {self.std_mode!r}; expected one of {STD_MODES}")
        if self.rationale_decode not in RATIONALE_DECODES:
            raise ConfigError(
                f"unknown rationale_decode {self.rationale_decode!r}; "
                f"expected one of {RATIONALE_DECODES}"
            )


@dataclass
class LogitStack:
    """N x L x V logits from N sampled passes over one teacher-forced target.

    `mask`, when given, flags the L valid (non-padding) positions.
    """

    samples: Tensor
    mask: np.ndarray | None = None

    def __post_init__(self):
        if not isinstance(self.samples, Tensor):
            self.samples = Tensor(np.asarray(self.samples, dtype=np.float64))
        if self.samples.ndim != 3:
            raise ValueError(f"stack must be (N, L, V), got shape {self.samples.shape}")
        if self.samples.size == 0:
            raise ValueError("empty logit stack")
        if not np.isfinite(self.samples.data).all():
            raise NumericError("logit stack contains non-finite values")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != (self.samples.shape[1],):
                raise ValueError(
                    f"mask length {self.mask.shape} does not match L={self.samples.shape[1]}"
                )

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]


@dataclass
class VotedLogits:
    """All intermediate and final aggregates of one vote, each (L, V)."""

    mean: Tensor
    std: Tensor
    weights: Tensor
    weighted: Tensor
    final: Tensor


def vote_components(stack: Tensor, cfg: VoteConfig) -> tuple[Tensor, Tensor, Tensor, Tensor, Tensor]:
    """Differentiable vote over axis 0 of an (N, ..., V) tensor.

    Returns (mean, std, weights, weighted, final), each (..., V). The
    vocabulary axis is the vote dimension: the weighted branch divides
    by the sum of weights over the last axis.
    """
    n = stack.shape[0]
    if n == 1:
        sample = stack.reshape(stack.shape[1:])
        ones = Tensor(np.ones_like(sample.data))
        zeros = Tensor(np.zeros_like(sample.data))
        return sample, zeros, ones, sample, sample
    mean = stack.sum(axis=0) / float(n)
    dev = stack - mean
    ddof = n - 1 if cfg.std_mode == "unbiased" else n
    std = ((dev * dev).sum(axis=0) / float(ddof)).sqrt()
    weights = 1.0 / (1.0 + std)
    total = stack.sum(axis=0)
    weight_norm = weights.sum(axis=-1, keepdims=True)
    weighted = weights * total / weight_norm
    if cfg.variant == "eq9_normalized":
        weighted = weighted / float(n)
    final = mean * cfg.alpha + weighted * (1.0 - cfg.alpha)
    return mean, std, weights, weighted, final


def vote_final(stack: Tensor, cfg: VoteConfig) -> Tensor:
    """Just the final voted logits of `vote_components` (training path)."""
    return vote_components(stack, cfg)[4]


def vote_logits(stack: LogitStack, cfg: VoteConfig) -> VotedLogits:
    """Aggregate an (N, L, V) stack into VotedLogits."""
    mean, std, weights, weighted, final = vote_components(stack.samples, cfg)
    return VotedLogits(mean=mean, std=std, weights=weights, weighted=weighted, final=final)


def voted_loss(stack: LogitStack, targets, cfg: VoteConfig) -> Tensor:
    """Mean cross-entropy between the voted logits and the target tokens.

    Masked positions are excluded from the mean. Differentiable into
    every sample of the stack.
    """
    targets = np.asarray(targets, dtype=np.int64)
    length = stack.samples.shape[1]
    if targets.shape != (length,):
        raise ValueError(f"targets shape {targets.shape} does not match stack L={length}")
    final = vote_final(stack.samples, cfg)
    losses = T.cross_entropy_logits(final, targets)
    if stack.mask is None:
        return losses.mean()
    count = int(stack.mask.sum())
    if count == 0:
        raise ValueError("mask excludes every position")
    return (losses * stack.mask.astype(np.float64)).sum() / float(count)


def _truncate_at(tokens: list[int], end_token: int | None) -> list[int]:
    if end_token is None:
        return tokens
    out = []
    for t in tokens:
        if t == end_token:
            break
        out.append(t)
    return out


def decode_rationale(
    voted: VotedLogits, stack: LogitStack, cfg: VoteConfig, end_token: int | None
) -> list[int]:
    """Token sequence from a vote: argmax of the final logits, or the
    per-position majority of per-sample argmaxes (ties -> lowest id).
    Truncated at the first end_token."""
    if cfg.rationale_decode == "logit_argmax":
        toks = np.argmax(voted.final.data, axis=-1)
    else:
        per_sample = np.argmax(stack.samples.data, axis=-1)  # (N, L)
        v = stack.samples.shape[-1]
        toks = np.empty(per_sample.shape[1], dtype=np.int64)
        for j in range(per_sample.shape[1]):
            toks[j] = np.argmax(np.bincount(per_sample[:, j], minlength=v))
    if stack.mask is not None:
        toks = toks[stack.mask]
    return _truncate_at([int(t) for t in toks], end_token)


def match_choice(decoded: list[int], choices: list[list[int]]) -> int:
    """Index of the choice equal to `decoded`, else the one with highest
    token-level F-score against it (ties -> lowest index)."""
    if not choices:
        raise ValueError("empty choices")
    for i, choice in enumerate(choices):
        if list(choice) == list(decoded):
            return i
    if not decoded:
        return 0
    scores = [rouge_l(decoded, list(c)) if c else 0.0 for c in choices]
    return int(np.argmax(scores))


def vote_answer(
    stack: LogitStack, cfg: VoteConfig, choices: list[list[int]], end_token: int | None
) -> int:
    """Vote over answer-position logits, decode, and map to a choice index."""
    voted = vote_logits(stack, cfg)
    decoded = decode_rationale(voted, stack, cfg, end_token)
    return match_choice(decoded, choices)
