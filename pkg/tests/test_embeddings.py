import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fuse_ser.embeddings import (
    EmbeddingParseError, EmbeddingStore, LinguisticEmbedding, average_token_embeddings, load_store,
    save_store, toy_embed,
)


def test_single_token_average():
    v = np.array([0.25, -1.0, 3.0])
    np.testing.assert_array_equal(average_token_embeddings([v]).vector, v.astype(np.float32))


def test_two_token_mean():
    np.testing.assert_array_equal(average_token_embeddings([np.array([1.0, 0.0]), np.array([0.0, 1.0])]).vector, [0.5, 0.5])


def test_random_mean_matches_brute_force():
    rng = np.random.default_rng(0)
    toks = [rng.standard_normal(7) for _ in range(5)]
    want = [sum(t[i] for t in toks) / 5 for i in range(7)]
    np.testing.assert_allclose(average_token_embeddings(toks).vector, want, atol=1e-7)


def test_empty_token_list_rejected():
    with pytest.raises(ValueError):
        average_token_embeddings([])


def test_embedding_must_be_finite():
    with pytest.raises(ValueError):
        LinguisticEmbedding(np.array([1.0, np.nan]))


def test_load_two_rows(tmp_path):
    f = tmp_path / "e.csv"
    f.write_text("u1,1,2,3,4\nu2,0.5,0.5,0.5,0.5\n")
    store = load_store(f)
    assert len(store) == 2 and store.dim == 4
    np.testing.assert_array_equal(store.get("u1").vector, [1, 2, 3, 4])


@pytest.mark.parametrize("body, line, what", [
    ("u1,1,2\nu2,1,2,3\n", 2, "ragged"),
    ("u1,1,2\nu1,3,4\n", 2, "duplicate"),
    ("u1,1,2\nu2,1,x\n", 2, "non-numeric"),
])
def test_parse_errors_name_the_line(tmp_path, body, line, what):
    f = tmp_path / "e.csv"
    f.write_text(body)
    with pytest.raises(EmbeddingParseError, match=what) as exc:
        load_store(f)
    assert exc.value.line == line and f"line {line}" in str(exc.value)


def test_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    vecs = {f"u{i}": rng.standard_normal(6) for i in range(4)}
    store = EmbeddingStore.from_vectors(vecs)
    save_store(store, tmp_path / "a.csv")
    back = load_store(tmp_path / "a.csv")
    save_store(back, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_text() == (tmp_path / "b.csv").read_text()
    for k in vecs:
        np.testing.assert_array_equal(back.get(k).vector, store.get(k).vector)


def test_missing_id_gives_zero_vector_with_warning(caplog):
    store = EmbeddingStore.from_vectors({"a": np.ones(3)})
    with caplog.at_level(logging.WARNING):
        v = store.get("nope").vector
    assert not v.any() and v.shape == (3,)
    assert "nope" in caplog.text


def test_store_is_immutable_and_lookups_repeatable():
    store = EmbeddingStore.from_vectors({"a": np.ones(3)})
    with pytest.raises(TypeError):
        store._entries["b"] = None
    v = store.get("a").vector
    with pytest.raises(ValueError):
        v[0] = 5.0
    np.testing.assert_array_equal(store.get("a").vector, np.ones(3))


def test_store_rejects_mixed_dimensions():
    with pytest.raises(ValueError):
        EmbeddingStore.from_vectors({"a": np.ones(3), "b": np.ones(4)})


def test_toy_embed_deterministic_and_empty():
    a, b = toy_embed("hello world", 16, seed=3), toy_embed("hello world", 16, seed=3)
    assert a.vector.tobytes() == b.vector.tobytes()
    assert not toy_embed("", 16).vector.any()
    assert not toy_embed(None, 16).vector.any()
    assert not np.array_equal(toy_embed("hello", 16, seed=0).vector, toy_embed("hello", 16, seed=1).vector)


@given(st.lists(st.sampled_from(["a", "b", "great", "awful", "x"]), min_size=1, max_size=6), st.integers(0, 5))
def test_toy_embed_is_the_token_average(tokens, seed):
    whole = toy_embed(" ".join(tokens), 12, seed).vector
    parts = np.mean([toy_embed(t, 12, seed).vector.astype(np.float64) for t in tokens], axis=0)
    np.testing.assert_allclose(whole, parts, atol=1e-6)
    assert whole.shape == (12,)


def test_token_vectors_are_unit_length():
    assert np.linalg.norm(toy_embed("word", 32).vector) == pytest.approx(1.0, abs=1e-6)
