"""Input validation helpers shared by the estimator, pipeline, and CLI."""

from __future__ import annotations

from .errors import DataError
from .model import ModelConfig, MultimodalExample


class NotFittedError(ValueError):
    """Estimator method called before fit()."""


def check_is_fitted(estimator, attributes=("stage1_params_", "stage2_params_")) -> None:
    missing = [a for a in attributes if getattr(estimator, a, None) is None]
    if missing:
        raise NotFittedError(
            f"{type(estimator).__name__} is not fitted yet; call fit() first "
            f"(missing {missing})"
        )


def validate_examples(examples, cfg: ModelConfig) -> list[MultimodalExample]:
    """Check every example against the model's vocabulary and length limits."""
    examples = list(examples)
    if not examples:
        raise DataError("empty example list")
    for ex in examples:
        if not isinstance(ex, MultimodalExample):
            raise DataError(f"expected MultimodalExample, got {type(ex).__name__}")
        all_tokens = list(ex.question_tokens) + list(ex.rationale_tokens)
        for choice in ex.choices:
            all_tokens.extend(choice)
        if any(t < 0 or t >= cfg.vocab_size for t in all_tokens):
            raise DataError(f"example {ex.id}: token id outside vocab of {cfg.vocab_size}")
        if len(ex.rationale_tokens) + 1 > cfg.max_rationale_len:
            raise DataError(
                f"example {ex.id}: rationale length {len(ex.rationale_tokens)} exceeds "
                f"max_rationale_len {cfg.max_rationale_len} (incl. end token)"
            )
        if len(ex.choices[ex.answer_index]) + 1 > cfg.max_answer_len:
            raise DataError(f"example {ex.id}: answer target exceeds max_answer_len")
        if ex.image_features.shape != (cfg.image_cells, cfg.image_feature_dim):
            raise DataError(
                f"example {ex.id}: image grid {ex.image_features.shape} does not match "
                f"({cfg.image_cells}, {cfg.image_feature_dim})"
            )
    return examples
