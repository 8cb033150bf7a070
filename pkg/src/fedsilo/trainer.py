"""Local training for the desk-scale toy models.

Two model kinds are supported: a linear softmax classifier and a
one-hidden-layer tanh MLP. Either may carry LoRA adapters on any of its
weight matrices, in which case only the adapter factors are trained.
All arithmetic is float64.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping

import numpy as np

from . import adapters as lora
from .errors import (
    EmptyDataset,
    EmptyShard,
    LabelOutOfRange,
    NonFiniteGradient,
    ShapeMismatch,
)
from .taskdata import ALL, Dataset
from .tensor import F32, F64, ModelState

LINEAR_SOFTMAX = "linear_softmax"
MLP_1HIDDEN = "mlp1"
MODEL_KINDS = (LINEAR_SOFTMAX, MLP_1HIDDEN)


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class TrainerConfig:
    learning_rate: float = 1e-4
    decay: float = 0.85
    batch_size: int = 4
    batches_per_round: int | str = ALL
    max_token_length: int = 512
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must be in (0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.batches_per_round != ALL and (
            not isinstance(self.batches_per_round, int) or self.batches_per_round < 1
        ):
            raise ValueError("batches_per_round must be a positive integer or 'ALL'")
        if self.max_token_length < 1:
            raise ValueError("max_token_length must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainerConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown trainer settings: {sorted(unknown)}")
        return cls(**d)


def effective_lr(config: TrainerConfig, global_round: int) -> float:
    """Learning rate for a global round: geometric decay once per round."""
    return config.learning_rate * config.decay ** global_round


@dataclass(frozen=True)
class ModelSpec:
    """Everything needed to rebuild an identical base model on any host."""

    kind: str
    input_dim: int
    class_count: int
    hidden_dim: int | None = None
    init_seed: int = 0
    init_std: float = 0.01
    adapter: lora.AdapterSpec | None = None
    adapter_seed: int = 0
    dtype: str = F64

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {MODEL_KINDS}")
        if self.input_dim < 1 or self.class_count < 2:
            raise ValueError("input_dim must be >= 1 and class_count >= 2")
        if self.kind == MLP_1HIDDEN and (self.hidden_dim is None or self.hidden_dim < 1):
            raise ValueError("mlp1 needs hidden_dim >= 1")
        if self.dtype not in (F32, F64):
            raise ValueError(f"dtype must be F32 or F64, got {self.dtype!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adapter"] = self.adapter.to_dict() if self.adapter else None
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelSpec":
        d = dict(d)
        if d.get("adapter"):
            d["adapter"] = lora.AdapterSpec.from_dict(d["adapter"])
        return cls(**d)

    def build(self) -> "ToyModel":
        rng = np.random.default_rng(self.init_seed)
        if self.kind == LINEAR_SOFTMAX:
            shapes = [("linear.weight", (self.class_count, self.input_dim)), ("linear.bias", (self.class_count,))]
        else:
            shapes = [
                ("hidden.weight", (self.hidden_dim, self.input_dim)),
                ("hidden.bias", (self.hidden_dim,)),
                ("output.weight", (self.class_count, self.hidden_dim)),
                ("output.bias", (self.class_count,)),
            ]
        arrays = {}
        for name, shape in shapes:
            if name.endswith(".weight"):
                arrays[name] = rng.normal(0.0, self.init_std, size=shape)
            else:
                arrays[name] = np.zeros(shape)
        base = ModelState.from_arrays(arrays, self.dtype)
        adapter = lora.init_adapter(self.adapter, base, self.adapter_seed) if self.adapter else None
        return ToyModel(self.kind, base, adapter)


# --------------------------------------------------------------------------
# model


@dataclass(frozen=True, eq=False)
class ToyModel:
    kind: str
    base: ModelState
    adapter: lora.AdapterState | None = None

    @property
    def input_dim(self) -> int:
        first = "linear.weight" if self.kind == LINEAR_SOFTMAX else "hidden.weight"
        return self.base[first].dims[1]

    @property
    def class_count(self) -> int:
        last = "linear.bias" if self.kind == LINEAR_SOFTMAX else "output.bias"
        return self.base[last].dims[0]

    @property
    def dtype(self) -> str:
        return next(iter(self.base.values())).dtype

    def trainable_state(self) -> ModelState:
        if self.adapter is not None:
            return lora.extract_trainable(self.adapter)
        return self.base

    def with_trainable(self, state: ModelState) -> "ToyModel":
        if self.adapter is not None:
            return replace(self, adapter=lora.merge_trainable(self.adapter, state))
        if state.signature() != self.base.signature():
            raise ShapeMismatch("trainable state does not match the model's parameters")
        return replace(self, base=state)

    def effective_params(self) -> dict[str, np.ndarray]:
        params = {k: t.array.astype(np.float64) for k, t in self.base.items()}
        if self.adapter is not None:
            for target in self.adapter.targets:
                W = params[target]
                delta = lora.lora_delta(self.adapter.A(target), self.adapter.B(target), self.adapter.spec)
                params[target] = np.where(delta == 0, W, W + delta)
        return params

    def logits(self, X) -> np.ndarray:
        return _forward(self.kind, self.effective_params(), np.asarray(X, dtype=np.float64))[0]

    def predict(self, X) -> np.ndarray:
        # np.argmax returns the first maximum: ties go to the lowest class index
        return np.argmax(self.logits(X), axis=1)


def _forward(kind, params, X):
    if kind == LINEAR_SOFTMAX:
        return X @ params["linear.weight"].T + params["linear.bias"], None
    H = np.tanh(X @ params["hidden.weight"].T + params["hidden.bias"])
    return H @ params["output.weight"].T + params["output.bias"], H


def _backward(kind, params, X, H, G) -> dict[str, np.ndarray]:
    if kind == LINEAR_SOFTMAX:
        return {"linear.weight": G.T @ X, "linear.bias": G.sum(axis=0)}
    dH = (G @ params["output.weight"]) * (1.0 - H * H)
    return {
        "hidden.weight": dH.T @ X,
        "hidden.bias": dH.sum(axis=0),
        "output.weight": G.T @ H,
        "output.bias": G.sum(axis=0),
    }


def cross_entropy(logits, labels) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood of ``labels`` and its gradient w.r.t. ``logits``."""
    Z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels)
    if Z.ndim != 2 or Z.shape[0] < 1:
        raise ShapeMismatch(f"logits must be a nonempty batch x classes matrix, got {Z.shape}")
    if y.shape != (Z.shape[0],):
        raise ShapeMismatch(f"{y.shape[0] if y.ndim else 0} labels for {Z.shape[0]} rows")
    n, C = Z.shape
    if y.size and (y.min() < 0 or y.max() >= C):
        raise LabelOutOfRange(f"labels must lie in [0, {C})")
    shifted = Z - Z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    log_probs = shifted - log_norm[:, None]
    rows = np.arange(n)
    loss = -log_probs[rows, y].mean()
    grad = np.exp(log_probs)
    grad[rows, y] -= 1.0
    return float(loss), grad / n


def loss_and_grads(model: ToyModel, X, y) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and gradients for the model's trainable parameters (adapter factors
    when an adapter is attached, all base parameters otherwise)."""
    X = np.asarray(X, dtype=np.float64)
    params = model.effective_params()
    Z, H = _forward(model.kind, params, X)
    loss, G = cross_entropy(Z, y)
    grads = _backward(model.kind, params, X, H, G)
    if model.adapter is None:
        return loss, grads
    spec = model.adapter.spec
    out = {}
    for target in model.adapter.targets:
        dW = grads[target]
        A = model.adapter.A(target).astype(np.float64)
        B = model.adapter.B(target).astype(np.float64)
        out[target + lora.LORA_A] = spec.factor * (B.T @ dW)
        out[target + lora.LORA_B] = spec.factor * (dW @ A.T)
    return loss, out


# --------------------------------------------------------------------------
# optimizer


@dataclass(frozen=True, eq=False)
class AdamWState:
    step: int = 0
    m: Mapping[str, np.ndarray] = field(default_factory=dict)
    v: Mapping[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
               opt: AdamWState, lr_effective: float, config: TrainerConfig):
    """One decoupled-weight-decay Adam update. Returns ``(params, state)``."""
    if set(params) != set(grads):
        raise ShapeMismatch(f"gradient names {sorted(grads)} != parameter names {sorted(params)}")
    for name, g in grads.items():
        if np.shape(g) != np.shape(params[name]):
            raise ShapeMismatch(f"{name}: gradient {np.shape(g)} vs parameter {np.shape(params[name])}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(name)
    t = opt.step + 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        m = b1 * opt.m.get(name, 0.0) + (1.0 - b1) * g
        v = b2 * opt.v.get(name, 0.0) + (1.0 - b2) * g * g
        p = np.asarray(p, dtype=np.float64)
        p = p - lr_effective * config.weight_decay * p
        p = p - lr_effective * (m / c1) / (np.sqrt(v / c2) + config.eps)
        new_params[name], new_m[name], new_v[name] = p, m, v
    return new_params, AdamWState(t, new_m, new_v)


# --------------------------------------------------------------------------
# training loop


@dataclass(frozen=True)
class TrainMetrics:
    loss: float
    n_samples: int
    wall_ms: float

    def to_json(self) -> dict:
        return {"loss": self.loss, "n_samples": self.n_samples, "wall_ms": self.wall_ms}


def batch_schedule(n: int, batch_size: int, batches_per_round, rng) -> list[np.ndarray]:
    """Index batches for one round.

    ``ALL`` is a single shuffled pass with a trailing partial batch; a fixed
    count walks through fresh shuffles until enough batches exist.
    """
    def one_pass():
        order = rng.permutation(n)
        return [order[i:i + batch_size] for i in range(0, n, batch_size)]

    if batches_per_round == ALL:
        return one_pass()
    out: list[np.ndarray] = []
    while len(out) < batches_per_round:
        out.extend(one_pass())
    return out[:batches_per_round]


def round_rng(config: TrainerConfig, global_round: int) -> np.random.Generator:
    return np.random.default_rng([config.seed, global_round])


def local_train(model: ToyModel, shard: Dataset, config: TrainerConfig,
                global_round: int) -> tuple[ModelState, TrainMetrics]:
    if len(shard) == 0:
        raise EmptyShard("cannot train on an empty shard")
    if shard.n_features != model.input_dim:
        raise ShapeMismatch(f"shard has {shard.n_features} features, model expects {model.input_dim}")
    started = time.perf_counter()
    lr = effective_lr(config, global_round)
    batches = batch_schedule(len(shard), config.batch_size, config.batches_per_round,
                             round_rng(config, global_round))
    trainable = model.trainable_state()
    dtype = next(iter(trainable.values())).dtype
    params = {k: t.array.astype(np.float64) for k, t in trainable.items()}
    opt = AdamWState()
    current = model
    losses = []
    for idx in batches:
        loss, grads = loss_and_grads(current, shard.X[idx], shard.y[idx])
        losses.append(loss)
        params, opt = adamw_step(params, grads, opt, lr, config)
        current = current.with_trainable(ModelState.from_arrays(params, dtype))
    wall_ms = (time.perf_counter() - started) * 1000.0
    metrics = TrainMetrics(float(np.mean(losses)), len(shard), wall_ms)
    return current.trainable_state(), metrics


def mean_loss(model: ToyModel, dataset: Dataset) -> float:
    if len(dataset) == 0:
        raise EmptyDataset("cannot score an empty dataset")
    return cross_entropy(model.logits(dataset.X), dataset.y)[0]


def evaluate(model: ToyModel, dataset: Dataset) -> float:
    if len(dataset) == 0:
        raise EmptyDataset("cannot evaluate on an empty dataset")
    return float(np.mean(model.predict(dataset.X) == dataset.y))


def n_batches(n: int, config: TrainerConfig) -> int:
    if config.batches_per_round == ALL:
        return math.ceil(n / config.batch_size)
    return config.batches_per_round
