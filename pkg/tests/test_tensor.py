
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedsilo.errors import BadMagic, CodecError, CorruptPayload, NameNotFound, Truncated, UnsupportedVersion
from fedsilo.tensor import F32, F64, ModelState, Tensor, decode_state, encode_state, load_state, save_state, state_get

# Hand-assembled from the documented layout, CRC from binascii.
EMPTY_HEX = "4150464c0100000000c853e718"
W_ONE_HEX = "4150464c01010000000100770001010000000000803f8a2a1fe2"


names = st.text(min_size=0, max_size=12)
dims = st.lists(st.integers(1, 4), min_size=1, max_size=3)


@st.composite
def states(draw):
    entries = draw(st.lists(st.tuples(names, dims, st.sampled_from([F32, F64])), max_size=5,
                            unique_by=lambda e: e[0]))
    out = []
    for name, shape, dtype in entries:
        size = int(np.prod(shape))
        raw = draw(st.binary(min_size=size * (4 if dtype == F32 else 8), max_size=size * (4 if dtype == F32 else 8)))
        arr = np.frombuffer(raw, dtype="<f4" if dtype == F32 else "<f8").reshape(shape)
        out.append((name, Tensor(arr, dtype)))
    return ModelState(out)


def test_state_get_examples():
    t1, t2 = Tensor([1.0]), Tensor([2.0])
    s = ModelState({"w": Tensor([2.0])})
    assert state_get(s, "w") == Tensor([2.0])
    with pytest.raises(NameNotFound):
        state_get(s, "b")
    assert state_get(ModelState({"a": t1, "b": t2}), "b") == t2


def test_empty_state_is_thirteen_bytes():
    blob = encode_state(ModelState())
    assert len(blob) == 13
    assert blob.hex() == EMPTY_HEX
    assert decode_state(blob) == ModelState()


def test_single_entry_matches_hand_layout():
    s = ModelState({"w": Tensor([1.0], F32)})
    assert encode_state(s).hex() == W_ONE_HEX
    assert decode_state(bytes.fromhex(W_ONE_HEX)) == s


def test_entry_order_changes_bytes():
    a = ModelState([("a", Tensor([1.0])), ("b", Tensor([2.0]))])
    b = ModelState([("b", Tensor([2.0])), ("a", Tensor([1.0]))])
    assert encode_state(a) != encode_state(b)
    assert a != b


def test_default_dtype():
    assert Tensor([1.0]).dtype == F32
    assert Tensor(np.zeros(2)).dtype == F64
    assert Tensor(np.zeros(2, dtype=np.float32)).dtype == F32


def test_tensor_is_read_only():
    t = Tensor(np.arange(3.0))
    with pytest.raises(ValueError):
        t.array[0] = 5.0


@pytest.mark.parametrize("bad", [[], np.zeros((2, 0)), 3.0])
def test_tensor_rejects_empty_or_scalar(bad):
    with pytest.raises(ValueError):
        Tensor(bad)


def test_duplicate_names_rejected():
    with pytest.raises(ValueError):
        ModelState([("w", Tensor([1.0])), ("w", Tensor([2.0]))])


def test_bit_exact_equality_distinguishes_signed_zero_and_nan_payloads():
    assert Tensor([0.0]) != Tensor([-0.0])
    nan = np.array([np.nan])
    assert Tensor(nan) == Tensor(nan.copy())


def test_last_byte_flip_is_corrupt():
    blob = bytearray(encode_state(ModelState({"w": Tensor([1.0, 2.0])})))
    blob[-1] ^= 0xFF
    with pytest.raises(CorruptPayload):
        decode_state(bytes(blob))


def test_bad_magic():
    blob = b"XXXX" + encode_state(ModelState())[4:]
    with pytest.raises(BadMagic):
        decode_state(blob)


def test_unsupported_version():
    blob = bytearray(encode_state(ModelState()))
    blob[4] = 2
    with pytest.raises(UnsupportedVersion):
        decode_state(bytes(blob))


@pytest.mark.parametrize("n", [0, 3, 4, 12])
def test_short_input_truncated(n):
    blob = encode_state(ModelState())[:n]
    with pytest.raises(Truncated):
        decode_state(blob)


def test_truncated_entry():
    blob = encode_state(ModelState({"w": Tensor(np.arange(10.0))}))
    with pytest.raises(CodecError):
        decode_state(blob[:-20])


def test_save_and_load(tmp_path):
    s = ModelState({"layer.weight": Tensor(np.arange(6.0).reshape(2, 3)), "layer.bias": Tensor([0.5, -1.5])})
    path = tmp_path / "model.apfl"
    save_state(s, path)
    assert load_state(path) == s
    assert list(load_state(path)) == ["layer.weight", "layer.bias"]


@given(states())
def test_round_trip_property(s):
    blob = encode_state(s)
    assert decode_state(blob) == s
    assert encode_state(decode_state(blob)) == blob


@given(states(), st.randoms(use_true_random=False))
def test_single_bit_flip_rejected_property(s, rnd):
    blob = bytearray(encode_state(s))
    bit = rnd.randrange(len(blob) * 8)
    blob[bit // 8] ^= 1 << (bit % 8)
    with pytest.raises(CodecError):
        decode_state(bytes(blob))


def test_encoding_deterministic_across_processes(tmp_path):
    import subprocess
    import sys

    code = (
        "import numpy as np, sys\n"
        "from fedsilo.tensor import ModelState, Tensor, encode_state\n"
        "s = ModelState({'a': Tensor(np.linspace(0, 1, 7)), 'b': Tensor([[1.5, 2.5]])})\n"
        "sys.stdout.write(encode_state(s).hex())\n"
    )
    outs = {subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True).stdout
            for _ in range(2)}
    assert len(outs) == 1
