"""Two-stage training with logit voting, unchanged single-pass inference,
and the ablation runner.

Stage 1 learns p(rationale | question, image); stage 2 learns
p(answer | question, rationale, image) with the rationale concatenated
to the question behind a separator token. During training, each batch
element is forwarded N times under independent dropout streams; the N
teacher-forced logit sets are voted and the loss is the cross-entropy
of the voted logits. N forwards are folded into the batch axis, one
dropout stream per sample, so results are bit-deterministic regardless
of scheduling. Inference is a single greedy pass per stage and never
reads the vote configuration (the `inference_voting` ablation exists
only as a negative control).

Ablation modes:
    full              both stages vote (the method)
    mean_only         vote with alpha = 1 (mean branch only)
    weighted_only     vote with alpha = 0 (weighted branch only)
    no_vote_rationale stage 1 trains with a single sample
    no_vote_answer    stage 2 trains with a single sample
    inference_voting  plain training; voting applied only at test time
    no_rationale      stage 2 sees an empty rationale segment
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .errors import ConfigError, NumericError
from .metrics import (
    GOOD_RATIONALE_ROUGE,
    EvalReport,
    bias_variance_decompose,
    jensen_gap,
    rouge_l,
)
from .model import (
    ModelConfig,
    encode,
    greedy_decode,
    init_params,
    save_checkpoint,
    teacher_forced_logits,
)
from .rng import RngStream, StackedRng, substream_id
from .synthdata import VOCAB, DatasetSpec, generate_dataset
from .tensor import Tensor, finite_difference_check, zero_grads
from .validation import check_is_fitted, validate_examples
from .voting import LogitStack, VoteConfig, decode_rationale, match_choice, vote_final, vote_logits

ABLATION_MODES = (
    "full",
    "mean_only",
    "weighted_only",
    "no_vote_rationale",
    "no_vote_answer",
    "inference_voting",
    "no_rationale",
)

AblationMode = str  # one of ABLATION_MODES

METRICS_COLUMNS = (
    "mode",
    "seed",
    "test_accuracy",
    "rouge_l",
    "bias_sq",
    "variance",
    "residual",
    "jensen_gap",
)


@dataclass(frozen=True)
class TrainConfig:
    """Desk-scale defaults, calibrated so plain SGD reliably learns the
    synthetic task: the rationale stage needs most of the budget, the
    answer stage (near-copy given a rationale) converges much faster."""

    vote: VoteConfig = VoteConfig()
    learning_rate: float = 0.002
    batch_size: int = 16
    epochs: int = 9
    stage2_epochs: int = 4
    seed: int = 0
    optimizer: str = "adam"
    stage2_rationale_source: str = "gold"
    ablation: str = "full"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1 or self.epochs < 1 or self.stage2_epochs < 1:
            raise ConfigError("batch_size and epoch counts must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.stage2_rationale_source not in ("gold", "voted_predicted"):
            raise ConfigError(
                f"unknown stage2_rationale_source {self.stage2_rationale_source!r}"
            )
        if self.ablation not in ABLATION_MODES:
            raise ConfigError(f"unknown ablation mode {self.ablation!r}")


def effective_vote(cfg: TrainConfig, stage: int) -> tuple[int, VoteConfig]:
    """Sample count and vote settings a stage actually trains with."""
    vote = cfg.vote
    n = vote.n_rationale_samples if stage == 1 else vote.n_answer_samples
    mode = cfg.ablation
    if mode == "mean_only":
        vote = replace(vote, alpha=1.0)
    elif mode == "weighted_only":
        vote = replace(vote, alpha=0.0)
    elif mode == "no_vote_rationale" and stage == 1:
        n = 1
    elif mode == "no_vote_answer" and stage == 2:
        n = 1
    elif mode == "inference_voting":
        n = 1
    return n, vote


# -- batching -----------------------------------------------------------------


def _pad_batch(seqs, pad_id: int) -> tuple[np.ndarray, np.ndarray]:
    length = max(len(s) for s in seqs)
    ids = np.full((len(seqs), length), pad_id, dtype=np.int64)
    mask = np.zeros((len(seqs), length), dtype=np.float64)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = 1.0
    return ids, mask


def _stage1_arrays(examples):
    enc_ids, enc_mask = _pad_batch([ex.question_tokens for ex in examples], VOCAB.pad_id)
    images = np.stack([ex.image_features for ex in examples])
    tgt_ids, tgt_mask = _pad_batch(
        [list(ex.rationale_tokens) + [VOCAB.eos_id] for ex in examples], VOCAB.pad_id
    )
    return enc_ids, enc_mask, images, tgt_ids, tgt_mask


def _stage2_input(ex, rationale_tokens) -> list[int]:
    return list(ex.question_tokens) + [VOCAB.sep_id] + list(rationale_tokens)


def _stage2_arrays(examples, rationales):
    enc_ids, enc_mask = _pad_batch(
        [_stage2_input(ex, r) for ex, r in zip(examples, rationales)], VOCAB.pad_id
    )
    images = np.stack([ex.image_features for ex in examples])
    tgt_ids, tgt_mask = _pad_batch(
        [list(ex.choices[ex.answer_index]) + [VOCAB.eos_id] for ex in examples], VOCAB.pad_id
    )
    return enc_ids, enc_mask, images, tgt_ids, tgt_mask


def _tile(arr: np.ndarray, n: int) -> np.ndarray:
    return np.tile(arr, (n,) + (1,) * (arr.ndim - 1))


def sampled_logit_stack(
    params, mcfg, enc_ids, enc_mask, images, tgt_ids, n_samples, streams
) -> Tensor:
    """(n, B, L, V) teacher-forced logits from n dropout-perturbed passes.

    The n passes are folded into the leading batch axis; dropout masks
    come from one pre-assigned stream per sample, so the result equals n
    independent passes run in sample-index order.
    """
    b = enc_ids.shape[0]
    rng = StackedRng(streams, group=b)
    memory, memory_mask = encode(
        params, mcfg, _tile(enc_ids, n_samples), _tile(enc_mask, n_samples),
        _tile(images, n_samples), rng, training=True,
    )
    logits = teacher_forced_logits(
        params, mcfg, memory, memory_mask, _tile(tgt_ids, n_samples),
        rng, training=True, bos_token=VOCAB.bos_id,
    )
    length, vocab = logits.shape[1], logits.shape[2]
    return logits.reshape(n_samples, b, length, vocab)


def batch_voted_loss(stack: Tensor, tgt_ids, tgt_mask, vote_cfg: VoteConfig) -> Tensor:
    """Voted cross-entropy summed over valid positions / count, whole batch."""
    final = vote_final(stack, vote_cfg)
    losses = T.cross_entropy_logits(final, tgt_ids)
    return (losses * tgt_mask).sum() / float(tgt_mask.sum())


def _sgd_step(params, lr: float) -> None:
    for p in params.values():
        if p.grad is not None:
            p.data -= lr * p.grad
            p.grad = None


def _train_stage(examples, mcfg, cfg, stage: int, arrays_fn, tag: str):
    """Generic stage trainer; returns (params, loss_curve rows)."""
    n_samples, vote_cfg = effective_vote(cfg, stage)
    params = init_params(mcfg, cfg.seed, tag=tag)
    enc_ids, enc_mask, images, tgt_ids, tgt_mask = arrays_fn(examples)
    n = len(examples)
    epochs = cfg.epochs if stage == 1 else cfg.stage2_epochs
    curve = []
    for epoch in range(epochs):
        order = RngStream(cfg.seed, substream_id("order", tag, epoch)).permutation(n)
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            streams = [
                RngStream(cfg.seed, substream_id("dropout", tag, epoch, step, i))
                for i in range(n_samples)
            ]
            stack = sampled_logit_stack(
                params, mcfg, enc_ids[idx], enc_mask[idx], images[idx], tgt_ids[idx],
                n_samples, streams,
            )
            loss = batch_voted_loss(stack, tgt_ids[idx], tgt_mask[idx], vote_cfg)
            value = loss.item()
            if not np.isfinite(value):
                bad = [examples[i].id for i in idx]
                raise NumericError(
                    f"non-finite loss in stage {stage} at epoch {epoch} step {step}; "
                    f"batch ids: {bad}"
                )
            zero_grads(params)
            loss.backward()
            _sgd_step(params, cfg.learning_rate)
            curve.append((stage, epoch, step, value))
    return params, curve


def train_stage1(examples, mcfg: ModelConfig, cfg: TrainConfig):
    """Train the rationale generator against voted teacher-forced logits."""
    examples = validate_examples(examples, mcfg)
    return _train_stage(examples, mcfg, cfg, stage=1, arrays_fn=_stage1_arrays, tag="stage1")


def predict_rationales(examples, mcfg, params, batch_size: int = 256) -> list[list[int]]:
    """Deterministic greedy stage-1 decode for each example."""
    out = []
    for start in range(0, len(examples), batch_size):
        chunk = examples[start : start + batch_size]
        enc_ids, enc_mask = _pad_batch([ex.question_tokens for ex in chunk], VOCAB.pad_id)
        images = np.stack([ex.image_features for ex in chunk])
        memory, memory_mask = encode(params, mcfg, enc_ids, enc_mask, images, None, training=False)
        out.extend(
            greedy_decode(
                params, mcfg, memory, memory_mask, VOCAB.bos_id, VOCAB.eos_id,
                mcfg.max_rationale_len,
            )
        )
    return out


def _stage2_rationales(examples, mcfg, cfg, stage1_params) -> list[list[int]]:
    if cfg.ablation == "no_rationale":
        return [[] for _ in examples]
    if cfg.stage2_rationale_source == "voted_predicted":
        if stage1_params is None:
            raise ConfigError("stage2_rationale_source=voted_predicted requires stage-1 params")
        return predict_rationales(examples, mcfg, stage1_params)
    return [list(ex.rationale_tokens) for ex in examples]


def train_stage2(examples, mcfg: ModelConfig, cfg: TrainConfig, stage1_params=None):
    """Train the answer model on question | sep | rationale inputs."""
    examples = validate_examples(examples, mcfg)
    rationales = _stage2_rationales(examples, mcfg, cfg, stage1_params)

    def arrays_fn(exs):
        return _stage2_arrays(exs, rationales)

    return _train_stage(examples, mcfg, cfg, stage=2, arrays_fn=arrays_fn, tag="stage2")


def train_pipeline(train_examples, mcfg: ModelConfig, cfg: TrainConfig):
    """Both stages; returns (stage1_params, stage2_params, loss_curve)."""
    s1, curve1 = train_stage1(train_examples, mcfg, cfg)
    s2, curve2 = train_stage2(train_examples, mcfg, cfg, stage1_params=s1)
    return s1, s2, curve1 + curve2


# -- inference -------------------------------------------------------------------


def _decode_answers(examples, mcfg, params, rationales, batch_size: int = 256):
    """Greedy stage-2 decode conditioned on the given rationale segments."""
    decoded = []
    for start in range(0, len(examples), batch_size):
        chunk = examples[start : start + batch_size]
        chunk_rat = rationales[start : start + batch_size]
        enc_ids, enc_mask = _pad_batch(
            [_stage2_input(ex, r) for ex, r in zip(chunk, chunk_rat)], VOCAB.pad_id
        )
        images = np.stack([ex.image_features for ex in chunk])
        memory, memory_mask = encode(params, mcfg, enc_ids, enc_mask, images, None, training=False)
        decoded.extend(
            greedy_decode(
                params, mcfg, memory, memory_mask, VOCAB.bos_id, VOCAB.eos_id,
                mcfg.max_answer_len,
            )
        )
    return decoded


def _voted_decode_stacks(examples, mcfg, params, build_inputs, n, max_len, tag, seed):
    """n dropout-on greedy decodes per example; per-example logit stacks
    over the common (shortest) decode prefix."""
    enc_ids, enc_mask, images = build_inputs(examples)
    b = len(examples)
    streams = [RngStream(seed, substream_id("infer_vote", tag, i)) for i in range(n)]
    rng = StackedRng(streams, group=b)
    memory, memory_mask = encode(
        params, mcfg, _tile(enc_ids, n), _tile(enc_mask, n), _tile(images, n), rng, training=True
    )
    seqs, logits, lengths = greedy_decode(
        params, mcfg, memory, memory_mask, VOCAB.bos_id, VOCAB.eos_id, max_len,
        rng=rng, use_dropout=True, return_logits=True,
    )
    logits = logits.reshape(n, b, -1, mcfg.vocab_size)
    lengths = lengths.reshape(n, b)
    min_len = lengths.min(axis=0)
    stacks = []
    for i in range(b):
        if min_len[i] == 0:
            stacks.append(None)
        else:
            stacks.append(LogitStack(Tensor(logits[:, i, : min_len[i], :])))
    return stacks


def infer_batch(
    examples,
    mcfg: ModelConfig,
    stage1_params,
    stage2_params,
    cfg: TrainConfig,
    conditioning: str = "predicted",
):
    """(rationales, answer indices) for a batch of examples.

    The default path is two deterministic greedy decodes; it never reads
    the vote sample counts. `conditioning` selects what the answer stage
    sees: the predicted rationale, the gold one, or none.
    """
    if conditioning not in ("predicted", "gold", "none"):
        raise ConfigError(f"unknown conditioning {conditioning!r}")
    if cfg.ablation == "inference_voting" and conditioning == "predicted":
        return _infer_voting(examples, mcfg, stage1_params, stage2_params, cfg)
    rationales = predict_rationales(examples, mcfg, stage1_params)
    if conditioning == "gold":
        answer_side = [list(ex.rationale_tokens) for ex in examples]
    elif conditioning == "none":
        answer_side = [[] for _ in examples]
    else:
        answer_side = rationales
    decoded = _decode_answers(examples, mcfg, stage2_params, answer_side)
    answers = [match_choice(d, ex.choices) for d, ex in zip(decoded, examples)]
    return rationales, answers


def _infer_voting(examples, mcfg, stage1_params, stage2_params, cfg: TrainConfig):
    """Test-time voting (negative control): N dropout decodes per stage,
    voted per position over the shortest decode prefix."""
    vote = cfg.vote

    def stage1_inputs(exs):
        ids, mask = _pad_batch([ex.question_tokens for ex in exs], VOCAB.pad_id)
        return ids, mask, np.stack([ex.image_features for ex in exs])

    stacks = _voted_decode_stacks(
        examples, mcfg, stage1_params, stage1_inputs, vote.n_rationale_samples,
        mcfg.max_rationale_len, "stage1", cfg.seed,
    )
    rationales = []
    for stack in stacks:
        if stack is None:
            rationales.append([])
        else:
            rationales.append(decode_rationale(vote_logits(stack, vote), stack, vote, VOCAB.eos_id))

    def stage2_inputs(exs):
        ids, mask = _pad_batch(
            [_stage2_input(ex, r) for ex, r in zip(exs, rationales)], VOCAB.pad_id
        )
        return ids, mask, np.stack([ex.image_features for ex in exs])

    answer_stacks = _voted_decode_stacks(
        examples, mcfg, stage2_params, stage2_inputs, vote.n_answer_samples,
        mcfg.max_answer_len, "stage2", cfg.seed,
    )
    answers = []
    for ex, stack in zip(examples, answer_stacks):
        if stack is None:
            answers.append(match_choice([], ex.choices))
        else:
            voted = vote_logits(stack, vote)
            decoded = decode_rationale(voted, stack, vote, VOCAB.eos_id)
            answers.append(match_choice(decoded, ex.choices))
    return rationales, answers


def infer(example, mcfg, stage1_params, stage2_params, cfg: TrainConfig):
    """Single-example inference: (rationale tokens, choice index)."""
    rationales, answers = infer_batch([example], mcfg, stage1_params, stage2_params, cfg)
    return rationales[0], answers[0]


# -- evaluation --------------------------------------------------------------------


def _diagnostic_jensen(examples, mcfg, params, cfg, n_samples=4):
    """Mean Jensen gap of teacher-forced dropout stacks over gold rationales."""
    enc_ids, enc_mask, images, tgt_ids, tgt_mask = _stage1_arrays(examples)
    streams = [
        RngStream(cfg.seed, substream_id("diag_jensen", i)) for i in range(n_samples)
    ]
    with T.no_grad():
        stack = sampled_logit_stack(
            params, mcfg, enc_ids, enc_mask, images, tgt_ids, n_samples, streams
        )
    gaps = []
    for i, ex in enumerate(examples):
        length = len(ex.rationale_tokens) + 1
        gaps.append(jensen_gap(stack.data[:, i, :length, :], tgt_ids[i, :length]))
    return float(np.mean(gaps))


def _diagnostic_bias_variance(examples, mcfg, s1, s2, cfg, n_runs=32):
    """Bias/variance of the predicted choice index under eval-time dropout,
    averaged over examples. Diagnostic only."""
    b = len(examples)
    seed = cfg.seed

    def stage1_inputs(exs):
        ids, mask = _pad_batch([ex.question_tokens for ex in exs], VOCAB.pad_id)
        return ids, mask, np.stack([ex.image_features for ex in exs])

    ids, mask, images = stage1_inputs(examples)
    streams = [RngStream(seed, substream_id("diag_bv", 1, i)) for i in range(n_runs)]
    rng = StackedRng(streams, group=b)
    memory, memory_mask = encode(
        params=s1, cfg=mcfg, tokens=_tile(ids, n_runs), token_mask=_tile(mask, n_runs),
        image=_tile(images, n_runs), rng=rng, training=True,
    )
    rat = greedy_decode(
        s1, mcfg, memory, memory_mask, VOCAB.bos_id, VOCAB.eos_id,
        mcfg.max_rationale_len, rng=rng, use_dropout=True,
    )
    tiled_examples = list(examples) * n_runs
    ids2, mask2 = _pad_batch(
        [_stage2_input(ex, r) for ex, r in zip(tiled_examples, rat)], VOCAB.pad_id
    )
    images2 = _tile(images, n_runs)
    streams2 = [RngStream(seed, substream_id("diag_bv", 2, i)) for i in range(n_runs)]
    rng2 = StackedRng(streams2, group=b)
    memory2, memory2_mask = encode(s2, mcfg, ids2, mask2, images2, rng2, training=True)
    decoded = greedy_decode(
        s2, mcfg, memory2, memory2_mask, VOCAB.bos_id, VOCAB.eos_id, mcfg.max_answer_len,
        rng=rng2, use_dropout=True,
    )
    preds = np.array(
        [match_choice(d, ex.choices) for d, ex in zip(decoded, tiled_examples)], dtype=np.float64
    ).reshape(n_runs, b)
    terms = np.array(
        [bias_variance_decompose(preds[:, i], float(examples[i].answer_index)) for i in range(b)]
    )
    return tuple(float(x) for x in terms.mean(axis=0)[:3])


def evaluate(
    examples,
    mcfg: ModelConfig,
    stage1_params,
    stage2_params,
    cfg: TrainConfig,
    conditioning: str = "predicted",
    diagnostics: bool = True,
    diag_examples: int = 32,
) -> EvalReport:
    """Accuracy, rationale ROUGE-L, four-way quality breakdown, and the
    stochastic diagnostics (Jensen gap, bias/variance of repeated
    dropout-on inference)."""
    if not examples:
        raise ValueError("empty evaluation split")
    rationales, answers = infer_batch(
        examples, mcfg, stage1_params, stage2_params, cfg, conditioning=conditioning
    )
    correct = [int(a == ex.answer_index) for a, ex in zip(answers, examples)]
    scores = [
        rouge_l(r, list(ex.rationale_tokens)) if ex.rationale_tokens else 0.0
        for r, ex in zip(rationales, examples)
    ]
    categories = dict.fromkeys(
        (
            "good_rationale_good_answer",
            "good_rationale_bad_answer",
            "bad_rationale_good_answer",
            "bad_rationale_bad_answer",
        ),
        0,
    )
    for sc, ok in zip(scores, correct):
        good_r = "good" if sc >= GOOD_RATIONALE_ROUGE else "bad"
        good_a = "good" if ok else "bad"
        categories[f"{good_r}_rationale_{good_a}_answer"] += 1
    if diagnostics:
        sub = examples[: min(diag_examples, len(examples))]
        jg = _diagnostic_jensen(sub, mcfg, stage1_params, cfg)
        bias_sq, variance, residual = _diagnostic_bias_variance(sub, mcfg, stage1_params, stage2_params, cfg)
    else:
        jg, bias_sq, variance, residual = 0.0, 0.0, 0.0, 0.0
    return EvalReport(
        test_accuracy=float(np.mean(correct)),
        rouge_l=float(np.mean(scores)),
        bias_sq=bias_sq,
        variance=variance,
        residual=residual,
        jensen_gap=jg,
        categories=categories,
    )


# -- ablation runner -----------------------------------------------------------------


def run_single(mode: str, seed: int, dataset, mcfg: ModelConfig, base_cfg: TrainConfig) -> dict:
    """Train both stages in one ablation mode and evaluate on the test split."""
    train, _, test = dataset
    cfg = replace(base_cfg, ablation=mode, seed=seed)
    s1, s2, _ = train_pipeline(train, mcfg, cfg)
    report = evaluate(test, mcfg, s1, s2, cfg)
    return {
        "mode": mode,
        "seed": seed,
        "test_accuracy": report.test_accuracy,
        "rouge_l": report.rouge_l,
        "bias_sq": report.bias_sq,
        "variance": report.variance,
        "residual": report.residual,
        "jensen_gap": report.jensen_gap,
    }


def _stage_signature(cfg: TrainConfig, stage: int) -> tuple:
    """What a stage's trained parameters actually depend on.

    Modes whose effective settings coincide (e.g. the single-sample
    bypass of no_vote_rationale and inference_voting) train bit-identical
    parameters, so the ablation runner trains each signature once.
    """
    n, vote = effective_vote(cfg, stage)
    core = ("n1",) if n == 1 else (n, vote.alpha, vote.variant, vote.std_mode)
    base = (stage, cfg.learning_rate, cfg.batch_size, cfg.seed)
    if stage == 1:
        return base + (cfg.epochs,) + core
    source = "empty" if cfg.ablation == "no_rationale" else cfg.stage2_rationale_source
    sig = base + (cfg.stage2_epochs,) + core + (source,)
    if source == "voted_predicted":
        sig += _stage_signature(cfg, 1)
    return sig


def _parallel_map(fn, jobs, n_jobs):
    if n_jobs == 1 or len(jobs) <= 1:
        return [fn(*args) for args in jobs]
    from joblib import Parallel, delayed

    return Parallel(n_jobs=n_jobs, backend="loky", inner_max_num_threads=1)(
        delayed(fn)(*args) for args in jobs
    )


def run_ablation(
    spec: DatasetSpec,
    mcfg: ModelConfig,
    base_cfg: TrainConfig,
    modes,
    n_seeds: int,
    n_jobs: int = 1,
    share_training: bool = True,
    collect_params: bool = False,
):
    """Train+eval per (mode, seed); rows in (mode, seed) order.

    With share_training, stages whose effective training configuration
    is identical across modes are trained once per seed and reused (the
    result is bit-identical to independent runs; see the reduction
    property tests). With collect_params, also returns a map
    (mode, seed) -> (stage1_params, stage2_params).
    """
    modes = list(modes)
    if not modes:
        raise ConfigError("modes must be non-empty")
    for m in modes:
        if m not in ABLATION_MODES:
            raise ConfigError(f"unknown ablation mode {m!r}")
    dataset = generate_dataset(spec)
    train_ex, _, test_ex = dataset
    jobs = [(mode, base_cfg.seed + s) for mode in modes for s in range(n_seeds)]
    if not share_training:
        if collect_params:
            raise ConfigError("collect_params requires share_training")
        rows = _parallel_map(
            lambda mode, seed: run_single(mode, seed, dataset, mcfg, base_cfg), jobs, n_jobs
        )
        return list(rows)

    cfgs = {(m, s): replace(base_cfg, ablation=m, seed=s) for m, s in jobs}
    s1_sigs: dict[tuple, TrainConfig] = {}
    for cfg in cfgs.values():
        s1_sigs.setdefault(_stage_signature(cfg, 1), cfg)
    s1_order = list(s1_sigs)
    s1_trained = _parallel_map(
        lambda sig: train_stage1(train_ex, mcfg, s1_sigs[sig])[0], [(s,) for s in s1_order], n_jobs
    )
    s1_params = dict(zip(s1_order, s1_trained))

    s2_sigs: dict[tuple, TrainConfig] = {}
    for cfg in cfgs.values():
        s2_sigs.setdefault(_stage_signature(cfg, 2), cfg)
    s2_order = list(s2_sigs)

    def _train_s2(sig):
        cfg = s2_sigs[sig]
        return train_stage2(
            train_ex, mcfg, cfg, stage1_params=s1_params[_stage_signature(cfg, 1)]
        )[0]

    s2_trained = _parallel_map(_train_s2, [(s,) for s in s2_order], n_jobs)
    s2_params = dict(zip(s2_order, s2_trained))

    def _eval_one(mode, seed):
        cfg = cfgs[(mode, seed)]
        report = evaluate(
            test_ex, mcfg, s1_params[_stage_signature(cfg, 1)],
            s2_params[_stage_signature(cfg, 2)], cfg,
        )
        return {
            "mode": mode,
            "seed": seed,
            "test_accuracy": report.test_accuracy,
            "rouge_l": report.rouge_l,
            "bias_sq": report.bias_sq,
            "variance": report.variance,
            "residual": report.residual,
            "jensen_gap": report.jensen_gap,
        }

    rows = list(_parallel_map(_eval_one, jobs, n_jobs))
    if collect_params:
        params_map = {
            (mode, seed): (
                s1_params[_stage_signature(cfgs[(mode, seed)], 1)],
                s2_params[_stage_signature(cfgs[(mode, seed)], 2)],
            )
            for mode, seed in jobs
        }
        return rows, params_map
    return rows


def write_metrics_csv(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_COLUMNS)
        for row in rows:
            writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in METRICS_COLUMNS])


def summarize_rows(rows) -> list[dict]:
    """Per-mode mean and std of accuracy and ROUGE-L, in first-seen order."""
    order = []
    groups = {}
    for row in rows:
        if row["mode"] not in groups:
            order.append(row["mode"])
            groups[row["mode"]] = []
        groups[row["mode"]].append(row)
    out = []
    for mode in order:
        accs = np.array([r["test_accuracy"] for r in groups[mode]])
        rls = np.array([r["rouge_l"] for r in groups[mode]])
        out.append(
            {
                "mode": mode,
                "n_seeds": len(accs),
                "mean_accuracy": float(accs.mean()),
                "std_accuracy": float(accs.std()),
                "mean_rouge_l": float(rls.mean()),
                "std_rouge_l": float(rls.std()),
            }
        )
    return out


def write_summary_csv(path, rows) -> None:
    cols = ("mode", "n_seeds", "mean_accuracy", "std_accuracy", "mean_rouge_l", "std_rouge_l")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for row in summarize_rows(rows):
            writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in cols])


def write_losscurve_csv(path, curve) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(("stage", "epoch", "step", "loss"))
        for stage, epoch, step, loss in curve:
            writer.writerow((stage, epoch, step, repr(loss)))


# -- end-to-end gradient check ----------------------------------------------------


def gradcheck_voted_pipeline(n_samples: int = 3, max_coords: int = 40) -> float:
    """Finite-difference check through the full voted stage-1 loss on a
    tiny model; returns the max relative error."""
    mcfg = ModelConfig(
        vocab_size=12, d_model=8, n_layers=1, n_heads=2, dropout_p=0.1,
        max_rationale_len=6, max_answer_len=4, image_feature_dim=5, image_cells=4,
    )
    params = init_params(mcfg, seed=0, tag="gradcheck")
    data_rng = RngStream(7, substream_id("gradcheck-data"))
    b = 4
    enc_ids = data_rng.integers(1, mcfg.vocab_size, (b, 5))
    enc_mask = np.ones((b, 5))
    enc_mask[2, 4] = 0.0
    images = data_rng.normal((b, mcfg.image_cells, mcfg.image_feature_dim))
    tgt_ids = data_rng.integers(1, mcfg.vocab_size, (b, 4))
    tgt_mask = np.ones((b, 4))
    tgt_mask[1, 3] = 0.0
    vote_cfg = VoteConfig(n_rationale_samples=n_samples)

    def loss_fn():
        streams = [RngStream(11, substream_id("gradcheck-drop", i)) for i in range(n_samples)]
        stack = sampled_logit_stack(
            params, mcfg, enc_ids, enc_mask, images, tgt_ids, n_samples, streams
        )
        return batch_voted_loss(stack, tgt_ids, tgt_mask, vote_cfg)

    return finite_difference_check(loss_fn, params, eps=1e-5, max_coords=max_coords)


# -- sklearn-style estimator ---------------------------------------------------------


class SelfConsistencyReasoner:
    """Two-stage reasoner trained with dropout-sampled logit voting.

    Follows the scikit-learn estimator protocol: constructor stores
    hyperparameters verbatim, `fit` learns `stage1_params_` and
    `stage2_params_`, `predict` returns choice indices.
    """

    def __init__(
        self,
        model_config: ModelConfig | None = None,
        vote: VoteConfig | None = None,
        learning_rate: float = 0.05,
        batch_size: int = 16,
        epochs: int = 30,
        seed: int = 0,
        stage2_rationale_source: str = "gold",
        ablation: str = "full",
    ):
        self.model_config = model_config
        self.vote = vote
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed
        self.stage2_rationale_source = stage2_rationale_source
        self.ablation = ablation

    _PARAM_NAMES = (
        "model_config",
        "vote",
        "learning_rate",
        "batch_size",
        "epochs",
        "seed",
        "stage2_rationale_source",
        "ablation",
    )

    def get_params(self, deep: bool = True) -> dict:
        return {name: getattr(self, name) for name in self._PARAM_NAMES}

    def set_params(self, **params) -> "SelfConsistencyReasoner":
        for name, value in params.items():
            if name not in self._PARAM_NAMES:
                raise ConfigError(f"invalid parameter {name!r} for {type(self).__name__}")
            setattr(self, name, value)
        return self

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            vote=self.vote if self.vote is not None else VoteConfig(),
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            epochs=self.epochs,
            seed=self.seed,
            stage2_rationale_source=self.stage2_rationale_source,
            ablation=self.ablation,
        )

    def fit(self, X, y=None) -> "SelfConsistencyReasoner":
        mcfg = self.model_config if self.model_config is not None else ModelConfig()
        cfg = self._train_config()
        s1, s2, curve = train_pipeline(list(X), mcfg, cfg)
        self.model_config_ = mcfg
        self.stage1_params_ = s1
        self.stage2_params_ = s2
        self.loss_curve_ = curve
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self)
        _, answers = infer_batch(
            list(X), self.model_config_, self.stage1_params_, self.stage2_params_,
            self._train_config(),
        )
        return np.asarray(answers, dtype=np.int64)

    def predict_rationale(self, X) -> list[list[int]]:
        check_is_fitted(self)
        return predict_rationales(list(X), self.model_config_, self.stage1_params_)

    def score(self, X, y=None) -> float:
        X = list(X)
        preds = self.predict(X)
        truth = np.asarray([ex.answer_index for ex in X] if y is None else y)
        return float((preds == truth).mean())

    def save(self, out_dir) -> None:
        check_is_fitted(self)
        os.makedirs(out_dir, exist_ok=True)
        save_checkpoint(os.path.join(out_dir, "stage1.ckpt"), self.model_config_, self.stage1_params_)
        save_checkpoint(os.path.join(out_dir, "stage2.ckpt"), self.model_config_, self.stage2_params_)
