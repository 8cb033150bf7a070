import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedsilo.adapters import (
    LLAMA2_7B,
    AdapterSpec,
    ArchitectureProfile,
    accounting_report,
    effective_weight,
    extract_trainable,
    format_mib,
    init_adapter,
    merge_trainable,
    trainable_bytes,
)
from fedsilo.errors import NameConventionViolation, ShapeMismatch, TargetNotFound, TargetNotMatrix
from fedsilo.tensor import F32, ModelState, Tensor


def toy_base(seed=0):
    rng = np.random.default_rng(seed)
    return ModelState.from_arrays({
        "enc.weight": rng.normal(size=(5, 3)).astype(np.float32),
        "enc.bias": np.zeros(5, dtype=np.float32),
        "dec.weight": rng.normal(size=(2, 5)).astype(np.float32),
    })


def test_llama_accounting():
    spec = AdapterSpec(8, 32.0, ["q_proj", "v_proj"])
    n = trainable_bytes(spec, LLAMA2_7B)
    assert n == 32 * 2 * (8 * 4096 + 4096 * 8) * 4 == 16_777_216
    assert format_mib(n) == "16.0 MiB"
    assert "16.0 MiB" in accounting_report(spec, LLAMA2_7B)


def test_payload_is_under_one_percent_of_dense_llama():
    spec = AdapterSpec(8, 32.0, ["q_proj", "v_proj"])
    assert trainable_bytes(spec, LLAMA2_7B) < 0.01 * LLAMA2_7B.base_bytes


def test_small_target_arithmetic():
    arch = ArchitectureProfile(1, {"w": (2, 2)})
    assert trainable_bytes(AdapterSpec(1, 1.0, ["w"]), arch) == 16


def test_layer_count_is_linear():
    spec = AdapterSpec(4, 8.0, ["w"])
    one = ArchitectureProfile(3, {"w": (7, 5)})
    two = ArchitectureProfile(6, {"w": (7, 5)})
    assert trainable_bytes(spec, two) == 2 * trainable_bytes(spec, one)


def test_init_identity_and_determinism():
    base = toy_base()
    spec = AdapterSpec(2, 4.0, ["enc.weight", "dec.weight"])
    a = init_adapter(spec, base, seed=7)
    assert a == init_adapter(spec, base, seed=7)
    assert a != init_adapter(spec, base, seed=8)
    for t in spec.target_names:
        assert effective_weight(base[t], a.A(t), a.B(t), spec) == base[t]
        assert a.A(t).shape == (2, base[t].dims[1])
        assert a.B(t).shape == (base[t].dims[0], 2)
        assert not a.B(t).any()


def test_init_a_statistics():
    base = ModelState.from_arrays({"w": np.zeros((400, 500))})
    a = init_adapter(AdapterSpec(64, 1.0, ["w"]), base, seed=1)
    assert abs(a.A("w").std() - 0.02) < 0.001
    assert abs(a.A("w").mean()) < 0.001


def test_init_errors():
    base = toy_base()
    with pytest.raises(TargetNotFound):
        init_adapter(AdapterSpec(1, 1.0, ["q"]), base, 0)
    with pytest.raises(TargetNotMatrix):
        init_adapter(AdapterSpec(1, 1.0, ["enc.bias"]), base, 0)


def test_one_by_one_example():
    spec = AdapterSpec(8, 32.0, ["w"])
    A = np.zeros((8, 1))
    B = np.zeros((1, 8))
    A[0, 0] = B[0, 0] = 1.0
    out = effective_weight(Tensor([[0.0]]), A, B, spec)
    assert out.array.tolist() == [[4.0]]


def test_zero_b_preserves_negative_zero():
    W = Tensor(np.array([[-0.0, 1.0]]))
    spec = AdapterSpec(1, 2.0, ["w"])
    assert effective_weight(W, np.ones((1, 2)), np.zeros((1, 1)), spec) == W


def test_effective_weight_dense_oracle(rng):
    for _ in range(20):
        W = rng.normal(size=(3, 3))
        A = rng.normal(size=(1, 3))
        B = rng.normal(size=(3, 1))
        spec = AdapterSpec(1, 3.0, ["w"])
        expected = [[W[i][j] + 3.0 * B[i][0] * A[0][j] for j in range(3)] for i in range(3)]
        assert np.allclose(effective_weight(Tensor(W), A, B, spec).array, expected, atol=1e-6, rtol=0)


def test_effective_weight_shape_mismatch():
    spec = AdapterSpec(1, 1.0, ["w"])
    with pytest.raises(ShapeMismatch):
        effective_weight(Tensor(np.zeros((2, 2))), np.zeros((1, 3)), np.zeros((2, 1)), spec)
    with pytest.raises(ShapeMismatch):
        effective_weight(Tensor(np.zeros((2, 2))), np.zeros((2, 2)), np.zeros((2, 1)), spec)


def test_extract_merge_round_trip_and_size():
    base = toy_base()
    spec = AdapterSpec(1, 6.0, ["enc.weight", "dec.weight"])
    a = init_adapter(spec, base, 0)
    state = extract_trainable(a)
    assert merge_trainable(a, state) == a
    assert all(n.endswith((".lora_A", ".lora_B")) for n in state)
    assert not set(state) & set(base)
    arch = ArchitectureProfile.from_state(base, spec.target_names)
    assert state.nbytes == trainable_bytes(spec, arch)
    assert state.nbytes < base.nbytes
    assert all(t.dtype == F32 for t in state.values())


def test_merge_rejects_bad_names_and_shapes():
    base = toy_base()
    spec = AdapterSpec(2, 4.0, ["enc.weight"])
    a = init_adapter(spec, base, 0)
    with pytest.raises(NameConventionViolation):
        merge_trainable(a, ModelState({"enc.weight": base["enc.weight"]}))
    with pytest.raises(NameConventionViolation):
        merge_trainable(a, ModelState({"enc.weight.lora_A": a.A("enc.weight")}))
    bad = ModelState({"enc.weight.lora_A": np.zeros((2, 4)), "enc.weight.lora_B": np.zeros((5, 2))})
    with pytest.raises(ShapeMismatch):
        merge_trainable(a, bad)


def test_merge_accepts_reordered_entries():
    base = toy_base()
    spec = AdapterSpec(2, 4.0, ["enc.weight"])
    a = init_adapter(spec, base, 0)
    s = extract_trainable(a)
    flipped = ModelState(reversed(list(s.items())))
    assert merge_trainable(a, flipped) == a


@pytest.mark.parametrize("kwargs", [dict(rank=0, scaling=1.0, target_names=["w"]),
                                    dict(rank=1, scaling=0.0, target_names=["w"]),
                                    dict(rank=1, scaling=1.0, target_names=[])])
def test_spec_validation(kwargs):
    with pytest.raises(ValueError):
        AdapterSpec(**kwargs)


@given(st.integers(1, 16), st.floats(0.1, 64), st.integers(1, 8), st.integers(1, 8), st.integers(1, 4))
def test_accounting_matches_init_size(rank, scaling, out_dim, in_dim, layers):
    base = ModelState.from_arrays({"w": np.zeros((out_dim, in_dim), dtype=np.float32)})
    spec = AdapterSpec(rank, scaling, ["w"])
    per_layer = extract_trainable(init_adapter(spec, base, 0)).nbytes
    assert trainable_bytes(spec, ArchitectureProfile(layers, {"w": (out_dim, in_dim)})) == layers * per_layer
