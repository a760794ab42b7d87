"""Deterministic synthetic multimodal QA task with gold rationales.

Each example shows a G x G grid of cells; every cell has a shape, a
color, and a count (1..5, with a unique grid-wide maximum). The image
side of an example is the per-cell feature vector

    [one-hot(shape, 8) | one-hot(color, 8) | count/5]  (+ Gaussian noise)

zero-padded to the configured feature width. Three question templates:

    T1  "what is the color of the cell with the largest count ?"
        (two-hop: find the argmax cell, then read its color)
    T2  "what shape is at row r column c ?"
    T3  "is the count at row r1 column c1 greater than ... ?"
        (tie-free by construction)

Gold rationales spell out the reasoning and always end with
"the answer is X .", so a rule-based reader that parses only the
rationale answers perfectly; the task genuinely factors through the
rationale. Everything is a pure function of the DatasetSpec: example i
draws from its own substream of the spec seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .model import MultimodalExample
from .rng import RngStream, substream_id

SHAPES = ("circle", "square", "triangle", "star", "hexagon", "diamond", "cross", "heart")
COLORS = ("red", "green", "blue", "yellow", "purple", "orange", "black", "white")
N_COUNTS = 5  # counts range over 1..5

_TEMPLATE_WORDS = (
    "what is the color of cell with largest count shape at row column "
    "greater than contains a has that its answer yes no not ? ."
).split()

PAD, BOS, EOS, SEP = "<pad>", "<bos>", "<eos>", "<sep>"
VOCAB_SIZE = 96


class Vocabulary:
    """Fixed word <-> id map; unknown words are a generation error."""

    def __init__(self, words: list[str]):
        self.words = list(words)
        self.index = {w: i for i, w in enumerate(self.words)}
        if len(self.index) != len(self.words):
            raise ConfigError("vocabulary contains duplicate words")
        self.pad_id = self.index[PAD]
        self.bos_id = self.index[BOS]
        self.eos_id = self.index[EOS]
        self.sep_id = self.index[SEP]

    def __len__(self):
        return len(self.words)

    def encode(self, text) -> list[int]:
        words = text.split() if isinstance(text, str) else list(text)
        try:
            return [self.index[w] for w in words]
        except KeyError as exc:
            raise DataError(f"word {exc.args[0]!r} is not in the fixed vocabulary") from None

    def decode(self, ids) -> str:
        return " ".join(self.words[int(i)] for i in ids)


def build_vocab() -> Vocabulary:
    words = [PAD, BOS, EOS, SEP]
    words += _TEMPLATE_WORDS
    words += list(SHAPES) + list(COLORS)
    words += [str(d) for d in range(6)]
    words += [f"<unused{i:02d}>" for i in range(VOCAB_SIZE - len(words))]
    assert len(words) == VOCAB_SIZE
    return Vocabulary(words)


VOCAB = build_vocab()


@dataclass
class GridWorld:
    """One image: per-cell shapes/colors/counts, plus the feature noise scale."""

    shapes: np.ndarray  # (G, G) int
    colors: np.ndarray  # (G, G) int
    counts: np.ndarray  # (G, G) int, unique maximum
    noise_sigma: float

    @property
    def grid_size(self) -> int:
        return self.shapes.shape[0]


@dataclass(frozen=True)
class DatasetSpec:
    seed: int = 0
    n_train: int = 2000
    n_val: int = 500
    n_test: int = 500
    grid_size: int = 4
    template_mix: tuple = (0.6, 0.2, 0.2)
    noise_sigma: float = 0.05
    image_feature_dim: int = 24

    def __post_init__(self):
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ConfigError("split sizes must be >= 1")
        if not 2 <= self.grid_size <= 6:
            raise ConfigError(f"grid_size must be in [2, 6], got {self.grid_size}")
        mix = tuple(float(w) for w in self.template_mix)
        if len(mix) != 3 or any(w < 0 for w in mix):
            raise ConfigError("template_mix must be 3 non-negative weights")
        if abs(sum(mix) - 1.0) > 1e-9:
            raise ConfigError(f"template_mix must sum to 1, got {sum(mix)}")
        object.__setattr__(self, "template_mix", mix)
        base_dim = len(SHAPES) + len(COLORS) + 1
        if self.image_feature_dim < base_dim:
            raise ConfigError(f"image_feature_dim must be >= {base_dim}")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")


def sample_gridworld(stream: RngStream, grid_size: int, noise_sigma: float) -> GridWorld:
    """Grid with attributes and a strictly unique maximum count."""
    g = grid_size
    shapes = stream.integers(0, len(SHAPES), (g, g))
    colors = stream.integers(0, len(COLORS), (g, g))
    winner = int(stream.integers(0, g * g))
    top = int(stream.integers(2, N_COUNTS + 1))
    counts = stream.integers(1, top, (g * g,))
    counts[winner] = top
    return GridWorld(shapes, colors, counts.reshape(g, g), noise_sigma)


def render_features(world: GridWorld, stream: RngStream, feature_dim: int) -> np.ndarray:
    """(G*G, feature_dim) noisy per-cell feature rows, row-major cells."""
    g = world.grid_size
    n = g * g
    base = np.zeros((n, feature_dim))
    base[np.arange(n), world.shapes.reshape(-1)] = 1.0
    base[np.arange(n), len(SHAPES) + world.colors.reshape(-1)] = 1.0
    base[:, len(SHAPES) + len(COLORS)] = world.counts.reshape(-1) / float(N_COUNTS)
    return base + stream.normal((n, feature_dim), scale=world.noise_sigma)


def _distinct_distractors(stream: RngStream, pool: tuple, gold: str, k: int) -> list[str]:
    rest = [w for w in pool if w != gold]
    order = stream.permutation(len(rest))
    return [rest[i] for i in order[:k]]


def _assemble(stream, question, rationale, gold_answer, distractors):
    choices = [gold_answer] + distractors
    order = stream.permutation(4)
    choices = [choices[i] for i in order]
    answer_index = choices.index(gold_answer)
    return question, rationale, choices, answer_index


def _make_t1(stream: RngStream, world: GridWorld):
    g = world.grid_size
    flat = world.counts.reshape(-1)
    winner = int(flat.argmax())
    r, c = divmod(winner, g)
    color = COLORS[world.colors.reshape(-1)[winner]]
    k = int(flat[winner])
    question = "what is the color of the cell with the largest count ?"
    rationale = (
        f"row {r} column {c} has the largest count {k} . "
        f"its color is {color} . the answer is {color} ."
    )
    return _assemble(stream, question, rationale, color, _distinct_distractors(stream, COLORS, color, 3))


def _make_t2(stream: RngStream, world: GridWorld):
    g = world.grid_size
    r = int(stream.integers(0, g))
    c = int(stream.integers(0, g))
    shape = SHAPES[world.shapes[r, c]]
    question = f"what shape is at row {r} column {c} ?"
    rationale = f"row {r} column {c} contains a {shape} . the answer is {shape} ."
    return _assemble(stream, question, rationale, shape, _distinct_distractors(stream, SHAPES, shape, 3))


def _make_t3(stream: RngStream, world: GridWorld):
    g = world.grid_size
    flat = world.counts.reshape(-1)
    a = int(stream.integers(0, g * g))
    b = int(stream.integers(0, g * g))
    while flat[a] == flat[b]:
        a = int(stream.integers(0, g * g))
        b = int(stream.integers(0, g * g))
    r1, c1 = divmod(a, g)
    r2, c2 = divmod(b, g)
    k1, k2 = int(flat[a]), int(flat[b])
    gold = "yes" if k1 > k2 else "no"
    comparison = "is greater than" if k1 > k2 else "is not greater than"
    question = (
        f"is the count at row {r1} column {c1} greater than the count at "
        f"row {r2} column {c2} ?"
    )
    rationale = (
        f"row {r1} column {c1} has count {k1} . row {r2} column {c2} has count {k2} . "
        f"{k1} {comparison} {k2} . the answer is {gold} ."
    )
    other = "no" if gold == "yes" else "yes"
    extra = _distinct_distractors(stream, COLORS + SHAPES, gold, 2)
    return _assemble(stream, question, rationale, gold, [other] + extra)


_MAKERS = (_make_t1, _make_t2, _make_t3)


def generate_example(spec: DatasetSpec, split: str, index: int, global_index: int) -> MultimodalExample:
    stream = RngStream(spec.seed, substream_id("example", global_index))
    template = stream.choice_index(spec.template_mix)
    world = sample_gridworld(stream, spec.grid_size, spec.noise_sigma)
    features = render_features(world, stream, spec.image_feature_dim)
    question, rationale, choices, answer_index = _MAKERS[template](stream, world)
    return MultimodalExample(
        id=f"{split}-{index:05d}",
        question_tokens=VOCAB.encode(question),
        image_features=features,
        choices=[VOCAB.encode(c) for c in choices],
        answer_index=answer_index,
        rationale_tokens=VOCAB.encode(rationale),
    )


def generate_dataset(spec: DatasetSpec):
    """(train, val, test) example lists; disjoint substreams per split."""
    splits = []
    offset = 0
    for split, n in (("train", spec.n_train), ("val", spec.n_val), ("test", spec.n_test)):
        splits.append([generate_example(spec, split, i, offset + i) for i in range(n)])
        offset += n
    return tuple(splits)


def read_answer_from_rationale(rationale_tokens, choices) -> int | None:
    """Rule-based reader: the choice named after the final 'answer is'.

    Returns the matching choice index, or None if the rationale has no
    parseable answer clause. Never looks at the image.
    """
    answer_id = VOCAB.index["answer"]
    is_id = VOCAB.index["is"]
    dot_id = VOCAB.index["."]
    toks = list(rationale_tokens)
    start = None
    for j in range(len(toks) - 1):
        if toks[j] == answer_id and toks[j + 1] == is_id:
            start = j + 2
    if start is None:
        return None
    mention = []
    for t in toks[start:]:
        if t == dot_id:
            break
        mention.append(t)
    for i, choice in enumerate(choices):
        if list(choice) == mention:
            return i
    return None


# -- serialization ----------------------------------------------------------------


def save_examples(path, examples) -> None:
    """Line-delimited JSON, one object per example, fixed field set."""
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            record = {
                "id": ex.id,
                "question": VOCAB.decode(ex.question_tokens),
                "image": ex.image_features.tolist(),
                "choices": [VOCAB.decode(c) for c in ex.choices],
                "answer_index": ex.answer_index,
                "rationale": VOCAB.decode(ex.rationale_tokens),
            }
            fh.write(json.dumps(record) + "\n")


_REQUIRED_FIELDS = ("id", "question", "image", "choices", "answer_index", "rationale")


def load_examples(path) -> list[MultimodalExample]:
    examples = []
    with open(path, "r", encoding="utf-8") as fh:
        for ln, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}: line {ln}: malformed JSON ({exc.msg})") from None
            missing = [f for f in _REQUIRED_FIELDS if f not in record]
            if missing:
                raise DataError(f"{path}: line {ln}: missing fields {missing}")
            examples.append(
                MultimodalExample(
                    id=record["id"],
                    question_tokens=VOCAB.encode(record["question"]),
                    image_features=np.asarray(record["image"], dtype=np.float64),
                    choices=[VOCAB.encode(c) for c in record["choices"]],
                    answer_index=int(record["answer_index"]),
                    rationale_tokens=VOCAB.encode(record["rationale"]),
                )
            )
    return examples
