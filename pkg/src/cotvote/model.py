"""Toy multimodal encoder-decoder used by both pipeline stages.

Architecture (pre-LN throughout, f64, sinusoidal text/decoder positions,
learned per-cell image positions):

    encoder: token embedding -> n_layers self-attention blocks
             -> one cross-attention block over linearly projected image
                cell features -> final layer norm
    decoder: shifted target embedding -> n_layers of (causal self-attn,
             cross-attn over encoder memory, feed-forward) -> head

Dropout (inverted, identity at eval) is the only stochasticity; a
training-mode forward draws every mask from the RngStream it is handed,
so a forward is a pure function of (params, inputs, stream).
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, ShapeError
from .rng import RngStream, substream_id
from .tensor import Tensor

CHECKPOINT_MAGIC = b"CVCK0001"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 96
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    dropout_p: float = 0.1
    max_rationale_len: int = 48
    max_answer_len: int = 8
    image_feature_dim: int = 24
    image_cells: int = 16

    def __post_init__(self):
        counts = (
            self.vocab_size,
            self.d_model,
            self.n_layers,
            self.n_heads,
            self.max_rationale_len,
            self.max_answer_len,
            self.image_feature_dim,
            self.image_cells,
        )
        if any(c < 1 for c in counts):
            raise ConfigError(f"all model dimensions must be >= 1: {self}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")

    @property
    def d_ff(self) -> int:
        return 2 * self.d_model


@dataclass
class MultimodalExample:
    """One question: text tokens, image feature grid, choices, gold
    rationale and gold answer index."""

    id: str
    question_tokens: list[int]
    image_features: np.ndarray  # (image_cells, image_feature_dim)
    choices: list[list[int]]
    answer_index: int
    rationale_tokens: list[int]

    def __post_init__(self):
        self.image_features = np.asarray(self.image_features, dtype=np.float64)
        if not 0 <= self.answer_index < len(self.choices):
            raise DataError(
                f"example {self.id}: answer_index {self.answer_index} out of range "
                f"for {len(self.choices)} choices"
            )

    def __eq__(self, other):
        if not isinstance(other, MultimodalExample):
            return NotImplemented
        return (
            self.id == other.id
            and self.question_tokens == other.question_tokens
            and np.array_equal(self.image_features, other.image_features)
            and self.choices == other.choices
            and self.answer_index == other.answer_index
            and self.rationale_tokens == other.rationale_tokens
        )


# -- parameters ---------------------------------------------------------------


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    """Name -> shape map; the single source of truth for the parameter set."""
    d, f, v = cfg.d_model, cfg.d_ff, cfg.vocab_size
    shapes: dict[str, tuple] = {
        "tok_emb": (v, d),
        "img_proj_w": (cfg.image_feature_dim, d),
        "img_proj_b": (d,),
        "img_pos": (cfg.image_cells, d),
    }

    def attn(prefix):
        for nm in ("wq", "wk", "wv", "wo"):
            shapes[f"{prefix}.{nm}"] = (d, d)
        for nm in ("bq", "bk", "bv", "bo"):
            shapes[f"{prefix}.{nm}"] = (d,)

    def ln(prefix):
        shapes[f"{prefix}_g"] = (d,)
        shapes[f"{prefix}_b"] = (d,)

    def ffn(prefix):
        shapes[f"{prefix}.w1"] = (d, f)
        shapes[f"{prefix}.b1"] = (f,)
        shapes[f"{prefix}.w2"] = (f, d)
        shapes[f"{prefix}.b2"] = (d,)

    for i in range(cfg.n_layers):
        ln(f"enc.{i}.ln1")
        attn(f"enc.{i}.self")
        ln(f"enc.{i}.ln2")
        ffn(f"enc.{i}.ff")
    ln("img.self.ln1")
    attn("img.self")
    ln("img.self.ln2")
    ffn("img.self.ff")
    ln("img.final_ln")
    ln("enc.cross.ln1")
    attn("enc.cross")
    ln("enc.cross.ln2")
    ffn("enc.cross.ff")
    ln("enc.final_ln")
    for i in range(cfg.n_layers):
        ln(f"dec.{i}.ln1")
        attn(f"dec.{i}.self")
        ln(f"dec.{i}.ln2")
        attn(f"dec.{i}.cross")
        ln(f"dec.{i}.ln3")
        ffn(f"dec.{i}.ff")
    ln("dec.final_ln")
    shapes["head_w"] = (d, v)
    shapes["head_b"] = (v,)
    return shapes


def param_count(cfg: ModelConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(cfg).values())


def init_params(cfg: ModelConfig, seed: int, tag: str = "model") -> dict[str, Tensor]:
    """Deterministic init: each parameter draws from its own stream keyed
    by (seed, tag, name), so creation order is irrelevant."""
    params: dict[str, Tensor] = {}
    for name, shape in param_shapes(cfg).items():
        stream = RngStream(seed, substream_id("init", tag, name))
        leaf = name.split(".")[-1]
        if name.endswith("_g"):
            data = np.ones(shape)
        elif name.endswith("_b") or leaf in ("b1", "b2", "bq", "bk", "bv", "bo"):
            data = np.zeros(shape)
        elif name == "tok_emb":
            data = stream.normal(shape, scale=1.0)
        elif name == "img_pos":
            data = _coordinate_codes(cfg)
        else:
            fan_in, fan_out = shape[0], shape[-1]
            data = stream.normal(shape, scale=np.sqrt(2.0 / (fan_in + fan_out)))
        params[name] = Tensor(data, requires_grad=True)
    return params


def _coordinate_codes(cfg: ModelConfig) -> np.ndarray:
    """Initial cell position embeddings: one-hot row / one-hot column axes
    (cells laid out row-major on a square grid). Learnable, but starting
    from an addressable code instead of random vectors."""
    g = int(round(np.sqrt(cfg.image_cells)))
    codes = np.zeros((cfg.image_cells, cfg.d_model))
    for idx in range(cfg.image_cells):
        r, c = divmod(idx, g)
        codes[idx, r % cfg.d_model] = 1.0
        codes[idx, (g + c) % cfg.d_model] = 1.0
    return codes


@lru_cache(maxsize=32)
def _sinusoid_table(length: int, d: int) -> np.ndarray:
    pos = np.arange(length)[:, None].astype(np.float64)
    i = np.arange(d)[None, :].astype(np.float64)
    angle = pos / np.power(10000.0, 2.0 * (i // 2) / d)
    table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    table.setflags(write=False)
    return table


# -- forward passes -------------------------------------------------------------


def _mha(params, prefix, q_in, kv_in, mask, n_heads):
    b, lq, d = q_in.shape
    lk = kv_in.shape[1]
    dh = d // n_heads

    def heads(t, length):
        return t.reshape(b, length, n_heads, dh).swapaxes(1, 2)

    q = heads(T.matmul(q_in, params[f"{prefix}.wq"]) + params[f"{prefix}.bq"], lq)
    k = heads(T.matmul(kv_in, params[f"{prefix}.wk"]) + params[f"{prefix}.bk"], lk)
    v = heads(T.matmul(kv_in, params[f"{prefix}.wv"]) + params[f"{prefix}.bv"], lk)
    ctx = T.attention(q, k, v, mask)
    merged = ctx.swapaxes(1, 2).reshape(b, lq, d)
    return T.matmul(merged, params[f"{prefix}.wo"]) + params[f"{prefix}.bo"]


def _ffn(params, prefix, x):
    h = (T.matmul(x, params[f"{prefix}.w1"]) + params[f"{prefix}.b1"]).relu()
    return T.matmul(h, params[f"{prefix}.w2"]) + params[f"{prefix}.b2"]


def _drop(x, cfg, rng, training):
    return T.dropout(x, cfg.dropout_p, rng, training)


def key_padding_mask(token_mask: np.ndarray) -> np.ndarray:
    """(B, L) validity -> additive (B, 1, 1, L) mask, -1e9 at padding."""
    return ((token_mask - 1.0) * 1e9)[:, None, None, :]


def causal_mask(length: int) -> np.ndarray:
    return np.triu(np.full((length, length), -1e9), k=1)[None, None, :, :]


def encode(
    params: dict,
    cfg: ModelConfig,
    tokens: np.ndarray,
    token_mask: np.ndarray,
    image: np.ndarray,
    rng,
    training: bool,
) -> tuple[Tensor, np.ndarray]:
    """Fuse question tokens with image cells into decoder memory.

    tokens (B, Lt) int ids, token_mask (B, Lt) 1.0/0.0, image
    (B, image_cells, image_feature_dim). Returns (memory, memory_mask)
    where memory is (B, Lt + image_cells, d): the text states (after one
    cross-attention fusion pass over the image) followed by the image
    cell states, so the decoder can address cells directly.
    """
    tokens = np.asarray(tokens)
    if tokens.ndim != 2 or tokens.shape[1] < 1:
        raise ShapeError(f"tokens must be (B, L>=1), got {tokens.shape}")
    if tokens.max() >= cfg.vocab_size or tokens.min() < 0:
        raise DataError(
            f"token id out of vocabulary: max id {int(tokens.max())} vs "
            f"vocab_size {cfg.vocab_size}"
        )
    image = np.asarray(image, dtype=np.float64)
    if image.shape[-2:] != (cfg.image_cells, cfg.image_feature_dim):
        raise ShapeError(
            f"image grid {image.shape[-2:]} does not match configured "
            f"({cfg.image_cells}, {cfg.image_feature_dim})"
        )
    token_mask = np.asarray(token_mask, dtype=np.float64)
    b, lt = tokens.shape
    x = T.embedding(params["tok_emb"], tokens) + Tensor(_sinusoid_table(lt, cfg.d_model))
    x = _drop(x, cfg, rng, training)
    attn_mask = key_padding_mask(token_mask)
    for i in range(cfg.n_layers):
        h = T.layer_norm(x, params[f"enc.{i}.ln1_g"], params[f"enc.{i}.ln1_b"])
        x = x + _drop(_mha(params, f"enc.{i}.self", h, h, attn_mask, cfg.n_heads), cfg, rng, training)
        h = T.layer_norm(x, params[f"enc.{i}.ln2_g"], params[f"enc.{i}.ln2_b"])
        x = x + _drop(_ffn(params, f"enc.{i}.ff", h), cfg, rng, training)
    img = T.matmul(Tensor(image), params["img_proj_w"]) + params["img_proj_b"]
    img = img + params["img_pos"]
    img = _drop(img, cfg, rng, training)
    h = T.layer_norm(img, params["img.self.ln1_g"], params["img.self.ln1_b"])
    img = img + _drop(_mha(params, "img.self", h, h, None, cfg.n_heads), cfg, rng, training)
    h = T.layer_norm(img, params["img.self.ln2_g"], params["img.self.ln2_b"])
    img = img + _drop(_ffn(params, "img.self.ff", h), cfg, rng, training)
    img = T.layer_norm(img, params["img.final_ln_g"], params["img.final_ln_b"])
    h = T.layer_norm(x, params["enc.cross.ln1_g"], params["enc.cross.ln1_b"])
    x = x + _drop(_mha(params, "enc.cross", h, img, None, cfg.n_heads), cfg, rng, training)
    h = T.layer_norm(x, params["enc.cross.ln2_g"], params["enc.cross.ln2_b"])
    x = x + _drop(_ffn(params, "enc.cross.ff", h), cfg, rng, training)
    x = T.layer_norm(x, params["enc.final_ln_g"], params["enc.final_ln_b"])
    memory = T.concat([x, img], axis=1)
    memory_mask = np.concatenate([token_mask, np.ones((b, cfg.image_cells))], axis=1)
    return memory, memory_mask


def shift_right(targets: np.ndarray, bos_token: int) -> np.ndarray:
    """Decoder input ids: BOS followed by the target prefix."""
    b, length = targets.shape
    out = np.empty_like(targets)
    out[:, 0] = bos_token
    out[:, 1:] = targets[:, :-1]
    return out


def decoder_logits(
    params: dict,
    cfg: ModelConfig,
    memory: Tensor,
    memory_mask: np.ndarray,
    dec_input: np.ndarray,
    rng,
    training: bool,
) -> Tensor:
    """Causal decoder stack over already-shifted input ids -> (B, L, V)."""
    dec_input = np.asarray(dec_input)
    b, length = dec_input.shape
    y = T.embedding(params["tok_emb"], dec_input) + Tensor(_sinusoid_table(length, cfg.d_model))
    y = _drop(y, cfg, rng, training)
    self_mask = causal_mask(length)
    cross_mask = key_padding_mask(np.asarray(memory_mask, dtype=np.float64))
    for i in range(cfg.n_layers):
        h = T.layer_norm(y, params[f"dec.{i}.ln1_g"], params[f"dec.{i}.ln1_b"])
        y = y + _drop(_mha(params, f"dec.{i}.self", h, h, self_mask, cfg.n_heads), cfg, rng, training)
        h = T.layer_norm(y, params[f"dec.{i}.ln2_g"], params[f"dec.{i}.ln2_b"])
        y = y + _drop(
            _mha(params, f"dec.{i}.cross", h, memory, cross_mask, cfg.n_heads), cfg, rng, training
        )
        h = T.layer_norm(y, params[f"dec.{i}.ln3_g"], params[f"dec.{i}.ln3_b"])
        y = y + _drop(_ffn(params, f"dec.{i}.ff", h), cfg, rng, training)
    y = T.layer_norm(y, params["dec.final_ln_g"], params["dec.final_ln_b"])
    return T.matmul(y, params["head_w"]) + params["head_b"]


def teacher_forced_logits(
    params: dict,
    cfg: ModelConfig,
    memory: Tensor,
    memory_mask: np.ndarray,
    targets: np.ndarray,
    rng,
    training: bool,
    bos_token: int,
) -> Tensor:
    """Logits (B, L, V) where position j conditions on memory and gold
    tokens strictly before j."""
    targets = np.asarray(targets)
    if targets.ndim != 2 or targets.shape[1] < 1:
        raise ValueError(f"targets must be (B, L>=1), got shape {targets.shape}")
    return decoder_logits(
        params, cfg, memory, memory_mask, shift_right(targets, bos_token), rng, training
    )


def greedy_decode(
    params: dict,
    cfg: ModelConfig,
    memory: Tensor,
    memory_mask: np.ndarray,
    bos_token: int,
    end_token: int,
    max_len: int,
    rng=None,
    use_dropout: bool = False,
    return_logits: bool = False,
):
    """Argmax decoding, stopping per row at end_token or max_len.

    Deterministic unless use_dropout (used only by the inference-voting
    ablation and stochastic diagnostics). With return_logits, also
    returns the (B, steps, V) per-step logits and per-row lengths.
    """
    b = memory.shape[0]
    cur = np.full((b, 1), bos_token, dtype=np.int64)
    done = np.zeros(b, dtype=bool)
    lengths = np.zeros(b, dtype=np.int64)
    step_logits = []
    with T.no_grad():
        for _ in range(max_len):
            logits = decoder_logits(
                params, cfg, memory, memory_mask, cur, rng, training=use_dropout
            )
            last = logits.data[:, -1, :]
            nxt = last.argmax(axis=-1)
            if return_logits:
                step_logits.append(last)
            nxt = np.where(done, end_token, nxt)
            lengths += (~done) & (nxt != end_token)
            done |= nxt == end_token
            cur = np.concatenate([cur, nxt[:, None]], axis=1)
            if done.all():
                break
    seqs = [list(map(int, cur[i, 1 : 1 + lengths[i]])) for i in range(b)]
    if return_logits:
        stacked = np.stack(step_logits, axis=1) if step_logits else np.zeros((b, 0, cfg.vocab_size))
        return seqs, stacked, lengths
    return seqs


# -- checkpoint io ---------------------------------------------------------------


def save_checkpoint(path, cfg: ModelConfig, params: dict) -> None:
    """Binary checkpoint: magic, JSON header (version + config), then
    sorted named f64 arrays. Byte-identical for identical inputs."""
    header = json.dumps(
        {"format_version": CHECKPOINT_VERSION, "model_config": asdict(cfg)},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            arr = np.ascontiguousarray(params[name].data, dtype="<f8")
            nm = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nm)))
            fh.write(nm)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> tuple[ModelConfig, dict]:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise DataError(f"{path}: not a checkpoint file (bad magic {magic!r})")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
        cfg = ModelConfig(**header["model_config"])
        (count,) = struct.unpack("<I", fh.read(4))
        params: dict[str, Tensor] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
            n = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(shape).copy()
            params[name] = Tensor(data, requires_grad=True)
    expected = param_shapes(cfg)
    if set(params) != set(expected):
        raise DataError(f"{path}: parameter names do not match the configured architecture")
    return cfg, params
