"""Experiment data plumbing: Alpaca-style prompts, per-dataset profiles and
synthetic stand-in datasets."""

from __future__ import annotations

import hashlib
import string
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import BadGeneratorParams, MissingField, UnknownDatasetKind

ALL = "ALL"


@dataclass(frozen=True, eq=False)
class Dataset:
    """Feature matrix ``X`` (n x d, float64) with integer labels ``y``."""

    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        X = np.ascontiguousarray(self.X, dtype=np.float64)
        y = np.ascontiguousarray(self.y, dtype=np.int64)
        if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
            raise ValueError(f"inconsistent dataset shapes X={X.shape} y={y.shape}")
        X.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    def __len__(self):
        return self.y.shape[0]

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.X[idx], self.y[idx])

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self.X.tobytes())
        h.update(self.y.tobytes())
        return h.hexdigest()


# --------------------------------------------------------------------------
# prompts

ALPACA_WITH_INPUT = (
    "Below is an instruction that describes a task, paired with an input that provides "
    "further context. Write a response that appropriately completes the request.\n\n"
    "### Instruction:\n{instruction}\n\n### Input:\n{input}\n\n### Response:\n"
)
ALPACA_NO_INPUT = (
    "Below is an instruction that describes a task. Write a response that appropriately "
    "completes the request.\n\n### Instruction:\n{instruction}\n\n### Response:\n"
)


@dataclass(frozen=True)
class PromptTemplate:
    dataset_kind: str
    instruction: str
    input: str
    answers: tuple[str, ...]

    @property
    def fields(self) -> tuple[str, ...]:
        names = []
        for pattern in (self.instruction, self.input):
            for _, name, _, _ in string.Formatter().parse(pattern):
                if name and name not in names:
                    names.append(name)
        return tuple(names)


PROMPTS: dict[str, PromptTemplate] = {
    "BoolQ": PromptTemplate(
        "BoolQ",
        "The following reading comprehension question requires you to understand the following "
        "passage and answer a question related to the passage. Please answer with only \"True\" "
        "or \"False\" to the question: {question}?",
        "{passage}",
        ("False", "True"),
    ),
    "CB": PromptTemplate(
        "CB",
        "Please determine whether the hypothesis \"{hypothesis}\" entails, contradicts, or is "
        "unrelated to the following premise: \"{premise}\". Please respond with either "
        "\"Entailment\", \"Contradiction\", or \"Neutral\".",
        "",
        ("Entailment", "Contradiction", "Neutral"),
    ),
    "COPA": PromptTemplate(
        "COPA",
        "Given the following premise, please determine whether Choice One, {choice1}, or Choice "
        "Two, {choice2}, is the {question} of the premise. Please respond with either \"One\" "
        "or \"Two\".",
        "{premise}",
        ("One", "Two"),
    ),
    "MultiRC": PromptTemplate(
        "MultiRC",
        "Given the following paragraph, please determine whether \"{answer}\" is a correct "
        "answer to the question \"{question}\". Please respond with either \"Yes\" or \"No\".",
        "{paragraph}",
        ("No", "Yes"),
    ),
    "RTE": PromptTemplate(
        "RTE",
        "Please determine whether the sentence \"{premise}\" entails the hypothesis "
        "\"{hypothesis}\" or not. Please respond with either \"Yes\" or \"No\".",
        "",
        ("Yes", "No"),
    ),
    "WiC": PromptTemplate(
        "WiC",
        "Please determine whether the word \"{word}\" is used in the same way in the following "
        "two sentences: \"{sentence1}\" and \"{sentence2}\" Please respond with either \"Yes\" "
        "or \"No\".",
        "",
        ("No", "Yes"),
    ),
    "WSC": PromptTemplate(
        "WSC",
        "Please carefully read the following passages. For each passage, you must identify "
        "whether the pronoun marked in *bold* refers to the \"quoted\" noun.",
        "{text}. \n Question: In the passage above, does the pronoun {span2_text} refer to {span1_text}",
        ("No", "Yes"),
    ),
}

DATASET_KINDS = tuple(PROMPTS)


def _template(kind: str) -> PromptTemplate:
    try:
        return PROMPTS[kind]
    except KeyError:
        raise UnknownDatasetKind(kind) from None


def format_prompt(kind: str, sample: Mapping[str, object]) -> dict[str, str]:
    template = _template(kind)
    missing = [f for f in template.fields if f not in sample]
    if missing:
        raise MissingField(f"{kind} sample lacks {', '.join(missing)}")
    # str.format would re-interpret braces inside field values; substitute piecewise
    values = {k: str(sample[k]) for k in template.fields}
    return {
        "instruction": _substitute(template.instruction, values),
        "input": _substitute(template.input, values),
    }


def _substitute(pattern: str, values: Mapping[str, str]) -> str:
    out = []
    for literal, name, _, _ in string.Formatter().parse(pattern):
        out.append(literal)
        if name is not None:
            out.append(values[name])
    return "".join(out)


def render_prompt(kind: str, sample: Mapping[str, object], scaffold: tuple[str, str] | None = None) -> str:
    """Full Alpaca-style prompt text; ``scaffold`` is ``(with_input, no_input)``."""
    with_input, no_input = scaffold or (ALPACA_WITH_INPUT, ALPACA_NO_INPUT)
    parts = format_prompt(kind, sample)
    if parts["input"]:
        return with_input.format(instruction=parts["instruction"], input=parts["input"])
    return no_input.format(instruction=parts["instruction"])


def answer_label(kind: str, answer: str) -> int:
    answers = _template(kind).answers
    if answer not in answers:
        raise ValueError(f"{answer!r} is not one of {answers}")
    return answers.index(answer)


def truncate_tokens(text: str, max_token_length: int) -> list[str]:
    return text.split()[:max_token_length]


def hashed_features(tokens, dim: int) -> np.ndarray:
    """Normalized bag-of-words counts over ``dim`` hashed buckets."""
    vec = np.zeros(dim)
    for tok in tokens:
        digest = hashlib.blake2b(tok.lower().encode("utf-8"), digest_size=8).digest()
        vec[int.from_bytes(digest, "little") % dim] += 1.0
    total = np.linalg.norm(vec)
    return vec / total if total else vec


# --------------------------------------------------------------------------
# per-dataset training profiles


@dataclass(frozen=True)
class DatasetProfile:
    dataset_kind: str
    batches_per_round: int | str
    max_token_length: int


PROFILES: dict[str, DatasetProfile] = {
    "BoolQ": DatasetProfile("BoolQ", 200, 350),
    "CB": DatasetProfile("CB", ALL, 350),
    "COPA": DatasetProfile("COPA", ALL, 300),
    "MultiRC": DatasetProfile("MultiRC", 200, 600),
    "RTE": DatasetProfile("RTE", 200, 200),
    "WiC": DatasetProfile("WiC", 200, 200),
    "WSC": DatasetProfile("WSC", ALL, 220),
}


def profile_for(kind: str) -> DatasetProfile:
    try:
        return PROFILES[kind]
    except KeyError:
        raise UnknownDatasetKind(kind) from None


# --------------------------------------------------------------------------
# synthetic generators


def _int_param(params, key, default=None, minimum=None):
    raw = params.get(key, default)
    if raw is None:
        raise BadGeneratorParams(f"missing parameter {key!r}")
    try:
        value = int(raw)
    except (TypeError, ValueError):
        raise BadGeneratorParams(f"{key}={raw!r} is not an integer") from None
    if minimum is not None and value < minimum:
        raise BadGeneratorParams(f"{key} must be >= {minimum}, got {value}")
    return value


def _float_param(params, key, default, minimum=None):
    raw = params.get(key, default)
    try:
        value = float(raw)
    except (TypeError, ValueError):
        raise BadGeneratorParams(f"{key}={raw!r} is not a number") from None
    if not np.isfinite(value) or (minimum is not None and value < minimum):
        raise BadGeneratorParams(f"{key}={raw!r} out of range")
    return value


def blobs(classes: int, n: int, dim: int | None = None, spread: float = 1.0,
          center_scale: float = 3.0, seed: int = 0) -> Dataset:
    """Isotropic Gaussian clusters, one per class, with balanced class counts.

    The first ``n % classes`` classes get one extra sample. Samples are
    returned in shuffled order.
    """
    dim = classes if dim is None else dim
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, center_scale, size=(classes, dim))
    counts = np.full(classes, n // classes)
    counts[: n % classes] += 1
    y = np.repeat(np.arange(classes), counts)
    X = centers[y] + spread * rng.normal(size=(n, dim))
    order = rng.permutation(n)
    return Dataset(X[order], y[order])


GENERATORS = {"blobs"}


def synth_dataset(generator: str, params: Mapping[str, object] | None = None, seed: int | None = None) -> Dataset:
    params = dict(params or {})
    if seed is not None:
        params["seed"] = seed
    if generator != "blobs":
        raise BadGeneratorParams(f"unknown generator {generator!r}; known: {sorted(GENERATORS)}")
    classes = _int_param(params, "classes", 2, minimum=1)
    n = _int_param(params, "n", None, minimum=1)
    if n < classes:
        raise BadGeneratorParams(f"n={n} cannot cover {classes} classes")
    dim = _int_param(params, "dim", classes, minimum=1)
    spread = _float_param(params, "spread", 1.0, minimum=0.0)
    center_scale = _float_param(params, "center_scale", 3.0, minimum=0.0)
    seed_value = _int_param(params, "seed", 0, minimum=0)
    return blobs(classes, n, dim, spread, center_scale, seed_value)


def train_val_split(data: Dataset, val_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Deterministic split; validation gets ``round(n * val_fraction)`` samples."""
    if not 0.0 <= val_fraction < 1.0:
        raise ValueError("val_fraction must be in [0, 1)")
    n = len(data)
    n_val = int(round(n * val_fraction))
    order = np.random.default_rng([seed, 0x5EED]).permutation(n)
    val_idx = np.sort(order[:n_val])
    train_idx = np.sort(order[n_val:])
    return data.subset(train_idx), data.subset(val_idx)
