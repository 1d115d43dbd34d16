import json
import math
import random

import httpx
import mpmath
import numpy as np
import pytest
from conftest import api
from hypothesis import given, settings
from hypothesis import strategies as st

from toolgrad.models import ApiSpec
from toolgrad.negatives import (
    EmbeddingError,
    EmbeddingIndex,
    HashedLocalEmbedder,
    RemoteEmbedder,
    cosine,
    embed_api,
    hashed_index,
    index_from_mapping,
    sample_negatives,
)
from toolgrad.simdata import synthetic_apis
from toolgrad.tools import Registry


def brute_force(positives, reg, vectors, p, aggregate="max"):
    """Pure-Python scan: score every non-positive, sort by (-score, id), take p - n."""

    def cos(a, b):
        dot = math.fsum(x * y for x, y in zip(a, b))
        return dot / (math.sqrt(math.fsum(x * x for x in a)) * math.sqrt(math.fsum(y * y for y in b)))

    pos = sorted(set(positives))
    scored = []
    for i in reg.ids():
        if i in pos:
            continue
        sims = [cos(vectors[i], vectors[q]) for q in pos]
        s = max(sims) if aggregate == "max" else math.fsum(sims) / len(sims)
        scored.append((-round(s, 12), i))
    scored.sort()
    return [i for _, i in scored[: max(0, min(p - len(pos), len(reg) - len(pos)))]]


def test_embedder_is_deterministic():
    e = HashedLocalEmbedder()
    a = e.embed(["weather forecast for a city"])
    assert np.array_equal(a, HashedLocalEmbedder().embed(["weather forecast for a city"]))
    assert not np.array_equal(a, HashedLocalEmbedder(seed=1).embed(["weather forecast for a city"]))
    assert e.embed([]).shape == (0, 256)


def test_distinct_texts_rarely_collide():
    texts = [f"api number {i} returns {i * 7 % 13} things" for i in range(10_000)]
    vecs = HashedLocalEmbedder(dim=64).embed(texts)
    assert len({v.tobytes() for v in vecs}) == 10_000


def test_similar_texts_score_higher():
    e = HashedLocalEmbedder()
    a, b, c = e.embed(["get weather forecast", "weather forecast lookup", "convert currency rates"])
    assert cosine(a, b) > cosine(a, c)


def test_embed_api_needs_name():
    with pytest.raises(ValueError):
        embed_api(ApiSpec("x", "", "d"), HashedLocalEmbedder())


def test_cosine_checks_dimensions_and_zero():
    with pytest.raises(ValueError):
        cosine([1, 0], [1, 0, 0])
    with pytest.raises(ValueError):
        cosine([0, 0], [1, 0])
    assert cosine([1, 0], [1, 0]) == 1.0


@settings(max_examples=50)
@given(st.lists(st.floats(-100, 100), min_size=8, max_size=8), st.lists(st.floats(-100, 100), min_size=8, max_size=8))
def test_cosine_matches_high_precision(a, b):
    if not any(a) or not any(b):
        return
    mpmath.mp.dps = 50
    va, vb = mpmath.matrix(a), mpmath.matrix(b)
    ref = sum(x * y for x, y in zip(va, vb)) / (mpmath.norm(va) * mpmath.norm(vb))
    assert abs(cosine(a, b) - float(ref)) < 1e-9


def test_index_rejects_wrong_dimension_and_nan():
    idx = EmbeddingIndex(3, "t")
    with pytest.raises(ValueError):
        idx.add("a", [1.0, 2.0])
    with pytest.raises(ValueError):
        idx.add("a", [1.0, float("nan"), 0.0])


def test_index_save_load_round_trip(tmp_path):
    reg = Registry.of(synthetic_apis(30, seed=2))
    idx = hashed_index(reg)
    idx.save(tmp_path / "i.json")
    back = EmbeddingIndex.load(tmp_path / "i.json")
    assert back.ids() == idx.ids() and back.provider_tag == "hashed-local"
    assert all(np.array_equal(back.vector(i), idx.vector(i)) for i in idx.ids())


@pytest.fixture(scope="module")
def lib():
    reg = Registry.of(synthetic_apis(120, seed=5))
    return reg, hashed_index(reg)


def test_n_equal_p_gives_none(lib):
    reg, idx = lib
    assert sample_negatives(reg.ids()[:5], reg, idx, p=5) == []


def test_six_positives_give_fourteen(lib):
    reg, idx = lib
    neg = sample_negatives(reg.ids()[:6], reg, idx, p=20)
    assert len(neg) == 14 and not set(neg) & set(reg.ids()[:6])


def test_more_positives_than_p_rejected(lib):
    reg, idx = lib
    with pytest.raises(ValueError):
        sample_negatives(reg.ids()[:6], reg, idx, p=5)


def test_small_library_caps_count():
    reg = Registry.of([api(f"a{i}") for i in range(8)])
    neg = sample_negatives(["a0", "a1"], reg, hashed_index(reg), p=20)
    assert sorted(neg) == [f"a{i}" for i in range(2, 8)]


def test_missing_embedding_rejected(lib):
    reg, _ = lib
    partial = hashed_index(Registry.of(list(reg)[:10]))
    with pytest.raises(ValueError):
        sample_negatives(reg.ids()[:2], reg, partial, p=20)


def test_ties_break_by_ascending_id():
    vecs = {"p": [1.0, 0.0], "b": [0.0, 1.0], "a": [0.0, 2.0], "c": [1.0, 1.0], "d": [0.0, 3.0]}
    reg = Registry.of([api(i) for i in vecs])
    assert sample_negatives(["p"], reg, index_from_mapping(vecs), p=4) == ["c", "a", "b"]


def test_matches_brute_force(lib):
    reg, idx = lib
    vectors = {i: list(idx.vector(i)) for i in reg.ids()}
    rng = random.Random(0)
    for _ in range(20):
        pos = rng.sample(reg.ids(), rng.randint(1, 8))
        for agg in ("max", "mean"):
            assert sample_negatives(pos, reg, idx, 20, agg) == brute_force(pos, reg, vectors, 20, agg)


def test_larger_p_extends_smaller_p(lib):
    reg, idx = lib
    pos = reg.ids()[10:13]
    assert sample_negatives(pos, reg, idx, 30)[:7] == sample_negatives(pos, reg, idx, 10)


def test_remote_embedder_batches_and_retries():
    seen = []

    def handler(req):
        body = req.read()
        seen.append(body)
        if len(seen) == 1:
            return httpx.Response(500)
        texts = json.loads(body)["input"]
        data = [{"index": i, "embedding": [float(len(t)), 1.0]} for i, t in reversed(list(enumerate(texts)))]
        return httpx.Response(200, json={"data": data})

    emb = RemoteEmbedder("http://stub/v1", batch_size=2, retries=1, client=httpx.Client(transport=httpx.MockTransport(handler)))
    out = emb.embed(["a", "bb", "ccc"])
    assert out.tolist() == [[1.0, 1.0], [2.0, 1.0], [3.0, 1.0]]
    assert len(seen) == 3


def test_remote_embedder_gives_up():
    client = httpx.Client(transport=httpx.MockTransport(lambda r: httpx.Response(503)))
    with pytest.raises(EmbeddingError):
        RemoteEmbedder("http://stub", retries=0, client=client).embed(["x"])
