"""Low-rank (LoRA) adapters over frozen base weight matrices.

Each adapted matrix ``W`` (out x in) gets factors ``A`` (rank x in) and
``B`` (out x rank); the effective weight is ``W + (scaling / rank) * B @ A``.
Only the factors are trained and exchanged, under the names
``<target>.lora_A`` and ``<target>.lora_B``.
"""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from .errors import NameConventionViolation, ShapeMismatch, TargetNotFound, TargetNotMatrix
from .tensor import ModelState, Tensor

LORA_A = ".lora_A"
LORA_B = ".lora_B"
INIT_STD = 0.02
MIB = 1 << 20


@dataclass(frozen=True)
class AdapterSpec:
    rank: int
    scaling: float
    target_names: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "target_names", tuple(self.target_names))
        if int(self.rank) != self.rank or self.rank < 1:
            raise ValueError(f"rank must be a positive integer, got {self.rank}")
        if not self.scaling > 0:
            raise ValueError(f"scaling must be positive, got {self.scaling}")
        if not self.target_names:
            raise ValueError("target_names must be nonempty")
        if len(set(self.target_names)) != len(self.target_names):
            raise ValueError("target_names must be unique")

    @property
    def factor(self) -> float:
        return self.scaling / self.rank

    def to_dict(self) -> dict:
        return {"rank": self.rank, "scaling": self.scaling, "target_names": list(self.target_names)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "AdapterSpec":
        return cls(int(d["rank"]), float(d["scaling"]), tuple(d["target_names"]))


@dataclass(frozen=True)
class ArchitectureProfile:
    """Shapes needed for payload accounting, without any weights.

    ``target_shapes`` maps each per-layer target to its ``(out_dim, in_dim)``.
    """

    layer_count: int
    target_shapes: Mapping[str, tuple[int, int]]
    bytes_per_param: int = 4
    base_param_count: int | None = None

    def __post_init__(self):
        if self.layer_count < 1:
            raise ValueError("layer_count must be >= 1")
        for name, shape in self.target_shapes.items():
            if len(shape) != 2 or min(shape) < 1:
                raise ValueError(f"target {name!r} must have a positive rank-2 shape, got {shape}")

    @classmethod
    def from_state(cls, base: ModelState, names: Sequence[str]) -> "ArchitectureProfile":
        shapes = {}
        widths = set()
        for name in names:
            tensor = _resolve_matrix(base, name)
            shapes[name] = tensor.dims
            widths.add(tensor.array.itemsize)
        if len(widths) != 1:
            raise ValueError("targets mix element widths")
        return cls(1, shapes, widths.pop(), sum(t.array.size for t in base.values()))

    @property
    def base_bytes(self) -> int | None:
        if self.base_param_count is None:
            return None
        return self.base_param_count * self.bytes_per_param


# Published LLaMA 2 7B shape: 32 decoder layers, 4096-wide attention projections.
LLAMA2_7B = ArchitectureProfile(
    layer_count=32,
    target_shapes={"q_proj": (4096, 4096), "v_proj": (4096, 4096)},
    bytes_per_param=4,
    base_param_count=6_738_415_616,
)


def _resolve_matrix(base: ModelState, name: str) -> Tensor:
    if name not in base:
        raise TargetNotFound(name)
    tensor = base[name]
    if len(tensor.dims) != 2:
        raise TargetNotMatrix(f"{name!r} has shape {tensor.dims}, expected a matrix")
    return tensor


class AdapterState:
    """Per-target ``(A, B)`` factor pairs, stored as an ordered ModelState."""

    __slots__ = ("spec", "_state")

    def __init__(self, spec: AdapterSpec, factors: ModelState):
        self.spec = spec
        self._state = factors

    def A(self, target: str) -> np.ndarray:
        return self._state[target + LORA_A].array

    def B(self, target: str) -> np.ndarray:
        return self._state[target + LORA_B].array

    @property
    def targets(self) -> tuple[str, ...]:
        return self.spec.target_names

    def __eq__(self, other):
        if not isinstance(other, AdapterState):
            return NotImplemented
        return self.spec == other.spec and self._state == other._state

    def __repr__(self):
        return f"AdapterState(rank={self.spec.rank}, targets={list(self.targets)})"


def init_adapter(spec: AdapterSpec, base: ModelState, seed: int) -> AdapterState:
    rng = np.random.default_rng(seed)
    entries = []
    for name in spec.target_names:
        weight = _resolve_matrix(base, name)
        out_dim, in_dim = weight.dims
        a = rng.normal(0.0, INIT_STD, size=(spec.rank, in_dim))
        b = np.zeros((out_dim, spec.rank))
        entries.append((name + LORA_A, Tensor(a, weight.dtype)))
        entries.append((name + LORA_B, Tensor(b, weight.dtype)))
    return AdapterState(spec, ModelState(entries))


def lora_delta(A: np.ndarray, B: np.ndarray, spec: AdapterSpec) -> np.ndarray:
    A = np.asarray(A)
    B = np.asarray(B)
    if A.ndim != 2 or B.ndim != 2 or A.shape[0] != spec.rank or B.shape[1] != spec.rank:
        raise ShapeMismatch(f"A {A.shape} / B {B.shape} do not fit rank {spec.rank}")
    return spec.factor * (B @ A)


def effective_weight(baseW, A, B, spec: AdapterSpec) -> Tensor:
    base = baseW if isinstance(baseW, Tensor) else Tensor(np.asarray(baseW, dtype=np.float64))
    W = base.array
    delta = lora_delta(A, B, spec)
    if delta.shape != W.shape:
        raise ShapeMismatch(f"update shape {delta.shape} does not match base {W.shape}")
    # a zero update must leave every base bit untouched (including -0.0)
    return Tensor(np.where(delta == 0, W, W + delta), base.dtype)


def trainable_bytes(spec: AdapterSpec, arch: ArchitectureProfile) -> int:
    per_layer = 0
    for name in spec.target_names:
        if name not in arch.target_shapes:
            raise TargetNotFound(name)
        out_dim, in_dim = arch.target_shapes[name]
        per_layer += spec.rank * in_dim + out_dim * spec.rank
    return arch.layer_count * per_layer * arch.bytes_per_param


def format_mib(n_bytes: int) -> str:
    return f"{n_bytes / MIB:.1f} MiB"


def accounting_report(spec: AdapterSpec, arch: ArchitectureProfile) -> str:
    """Human-readable payload summary. Sizes use binary megabytes (MiB)."""
    n = trainable_bytes(spec, arch)
    lines = [
        f"adapted matrices: {arch.layer_count} layers x {len(spec.target_names)} targets "
        f"({', '.join(spec.target_names)})",
        f"rank {spec.rank}, scaling {spec.scaling:g}, {arch.bytes_per_param} bytes/param",
        f"trainable payload: {n:,} bytes = {format_mib(n)}",
    ]
    if arch.base_bytes:
        lines.append(f"dense base model: {arch.base_bytes:,} bytes ({100.0 * n / arch.base_bytes:.3f}% exchanged)")
    return "\n".join(lines)


def extract_trainable(adapter: AdapterState) -> ModelState:
    return adapter._state


def merge_trainable(adapter: AdapterState, state: ModelState) -> AdapterState:
    expected = list(adapter._state.keys())
    for name in state:
        if not (name.endswith(LORA_A) or name.endswith(LORA_B)):
            raise NameConventionViolation(f"{name!r} is not a <target>{LORA_A}/<target>{LORA_B} name")
    if list(state.keys()) != expected:
        missing = sorted(set(expected) - set(state))
        extra = sorted(set(state) - set(expected))
        if missing or extra:
            raise NameConventionViolation(f"missing {missing}, unexpected {extra}")
        state = ModelState((k, state[k]) for k in expected)
    for name in expected:
        if state[name].dims != adapter._state[name].dims:
            raise ShapeMismatch(f"{name}: {state[name].dims} != {adapter._state[name].dims}")
    return AdapterState(adapter.spec, state)
