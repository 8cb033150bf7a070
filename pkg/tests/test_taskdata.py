import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedsilo.errors import BadGeneratorParams, MissingField, UnknownDatasetKind
from fedsilo.taskdata import (
    ALL,
    ALPACA_NO_INPUT,
    ALPACA_WITH_INPUT,
    DATASET_KINDS,
    PROFILES,
    PROMPTS,
    Dataset,
    answer_label,
    format_prompt,
    hashed_features,
    profile_for,
    render_prompt,
    synth_dataset,
    train_val_split,
    truncate_tokens,
)
from fedsilo.trainer import ModelSpec, TrainerConfig, evaluate, local_train

from .conftest import TESTDATA

SAMPLES = json.loads((TESTDATA / "prompts" / "samples.json").read_text())

# transcribed by hand from the published prompt table
TABLE_2 = {
    "BoolQ": (200, 350),
    "CB": (ALL, 350),
    "COPA": (ALL, 300),
    "MultiRC": (200, 600),
    "RTE": (200, 200),
    "WiC": (200, 200),
    "WSC": (ALL, 220),
}


def test_seven_kinds():
    assert set(DATASET_KINDS) == {"BoolQ", "CB", "COPA", "MultiRC", "RTE", "WiC", "WSC"}
    assert set(SAMPLES) == set(DATASET_KINDS)


@pytest.mark.parametrize("kind", sorted(TABLE_2))
def test_golden_prompt(kind):
    golden = (TESTDATA / "prompts" / f"{kind}.txt").read_bytes()
    assert render_prompt(kind, SAMPLES[kind]).encode("utf-8") == golden


@pytest.mark.parametrize("kind", sorted(TABLE_2))
def test_profiles_match_table(kind):
    p = profile_for(kind)
    assert (p.batches_per_round, p.max_token_length) == TABLE_2[kind]
    assert PROFILES[kind] == p


def test_rte_example():
    out = format_prompt("RTE", {"premise": "A", "hypothesis": "B"})
    assert out == {
        "instruction": 'Please determine whether the sentence "A" entails the hypothesis "B" or not. '
                       'Please respond with either "Yes" or "No".',
        "input": "",
    }


def test_boolq_passage_verbatim():
    passage = "  Odd {spacing}\tand {{braces}} kept as-is.  "
    out = format_prompt("BoolQ", {"question": "q", "passage": passage})
    assert out["input"] == passage
    assert out["instruction"].endswith("to the question: q?")


@pytest.mark.parametrize("kind", ["RTE", "CB", "WiC"])
def test_no_input_kinds(kind):
    assert format_prompt(kind, SAMPLES[kind])["input"] == ""
    assert "### Input:" not in render_prompt(kind, SAMPLES[kind])


def test_scaffolds():
    assert render_prompt("BoolQ", SAMPLES["BoolQ"]).startswith(ALPACA_WITH_INPUT.split("{")[0])
    assert render_prompt("RTE", SAMPLES["RTE"]).startswith(ALPACA_NO_INPUT.split("{")[0])
    custom = render_prompt("RTE", SAMPLES["RTE"], scaffold=("I:{instruction}|{input}", "I:{instruction}"))
    assert custom.startswith("I:Please determine") and "|" not in custom


def test_wsc_newline():
    out = format_prompt("WSC", {"text": "T", "span1_text": "X", "span2_text": "it"})
    assert out["input"] == "T. \n Question: In the passage above, does the pronoun it refer to X"


def test_missing_field():
    sample = dict(SAMPLES["WiC"])
    del sample["word"]
    with pytest.raises(MissingField):
        format_prompt("WiC", sample)


def test_unknown_kind():
    with pytest.raises(UnknownDatasetKind):
        format_prompt("SQuAD", {})
    with pytest.raises(UnknownDatasetKind):
        profile_for("SQuAD")


@pytest.mark.parametrize("kind", sorted(PROMPTS))
def test_template_invariants(kind):
    t = PROMPTS[kind]
    assert t.answers
    assert set(t.fields) <= set(SAMPLES[kind]) - {"label"}
    assert SAMPLES[kind]["label"] in t.answers


def test_answer_label():
    assert answer_label("CB", "Neutral") == 2
    with pytest.raises(ValueError):
        answer_label("CB", "Maybe")


def test_truncate_keeps_prefix():
    assert truncate_tokens("a b  c\nd", 3) == ["a", "b", "c"]
    assert truncate_tokens("a b", 10) == ["a", "b"]


def test_hashed_features():
    v = hashed_features(["Cat", "cat", "dog"], 32)
    assert v.shape == (32,) and abs(np.linalg.norm(v) - 1.0) < 1e-12
    assert not hashed_features([], 8).any()


# synthetic data


def test_blobs_example():
    a = synth_dataset("blobs", {"classes": 10, "n": 2000}, seed=7)
    b = synth_dataset("blobs", {"classes": "10", "n": "2000", "seed": "7"})
    assert len(a) == 2000
    assert np.bincount(a.y).tolist() == [200] * 10
    assert a.fingerprint() == b.fingerprint()


@given(st.integers(1, 6), st.integers(0, 60), st.integers(1, 5), st.integers(0, 2**31))
def test_blobs_counts_and_determinism(classes, extra, dim, seed):
    n = classes + extra
    params = {"classes": classes, "n": n, "dim": dim}
    a = synth_dataset("blobs", params, seed=seed)
    assert a.X.shape == (n, dim)
    counts = np.bincount(a.y, minlength=classes)
    assert counts.max() - counts.min() <= 1 and counts.sum() == n
    assert a.fingerprint() == synth_dataset("blobs", params, seed=seed).fingerprint()


@pytest.mark.parametrize("params", [
    {"classes": 3, "n": 0},
    {"classes": 5, "n": 3},
    {"classes": 0, "n": 10},
    {"classes": 2},
    {"classes": 2, "n": 10, "spread": -1},
    {"classes": 2, "n": 10, "spread": "nan"},
    {"classes": "two", "n": 10},
])
def test_bad_generator_params(params):
    with pytest.raises(BadGeneratorParams):
        synth_dataset("blobs", params)


def test_unknown_generator():
    with pytest.raises(BadGeneratorParams):
        synth_dataset("moons", {"n": 10})


def test_zero_spread_reaches_full_accuracy():
    data = synth_dataset("blobs", {"classes": 4, "n": 200, "dim": 4, "spread": 0.0}, seed=1)
    model = ModelSpec.from_dict({"kind": "linear_softmax", "input_dim": 4, "class_count": 4}).build()
    cfg = TrainerConfig(learning_rate=0.1, batch_size=16, batches_per_round=300, seed=0)
    model = model.with_trainable(local_train(model, data, cfg, 0)[0])
    assert evaluate(model, data) == 1.0


def test_split():
    data = synth_dataset("blobs", {"classes": 3, "n": 50}, seed=0)
    train, val = train_val_split(data, 0.2, seed=4)
    assert (len(train), len(val)) == (40, 10)
    rows = sorted(map(tuple, np.vstack([train.X, val.X])))
    assert rows == sorted(map(tuple, data.X))
    again = train_val_split(data, 0.2, seed=4)
    assert again[1].fingerprint() == val.fingerprint()
    with pytest.raises(ValueError):
        train_val_split(data, 1.0, 0)


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset(np.zeros((3, 2)), np.zeros(2))
    d = Dataset([[1.0], [2.0]], [0, 1])
    with pytest.raises(ValueError):
        d.X[0, 0] = 5.0
