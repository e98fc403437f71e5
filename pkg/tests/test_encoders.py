import numpy as np
import pytest

from groundgen.encoders import (
    HASH_DIM,
    ToyEncoder,
    ToyEncoderParams,
    encode_backward,
    encode_batch,
    hash_bow,
    hash_bucket,
    toy_entity_encode,
    toy_query_encode,
)
from groundgen.errors import MissingFeatureError
from groundgen.kb import EntityRecord, QueryRecord
from groundgen.losses import infonce_loss

from helpers import central_difference, max_rel_error, unit_rows


@pytest.fixture
def params(rng):
    return ToyEncoderParams.init(6, 5, rng)


def _normalize(v):
    return v / np.linalg.norm(v)


def test_hash_bow_is_fixed():
    bow = hash_bow("red car red")
    assert bow.shape == (HASH_DIM,)
    assert bow.sum() == 3
    assert bow[hash_bucket("red")] >= 2
    assert np.array_equal(hash_bow("red car red"), bow)
    assert not hash_bow("").any()


def test_blend_boundaries(params):
    feat = (1.0, -2.0, 0.5, 0.0, 3.0, 1.0)
    e_img = EntityRecord("Q1", "x", "", image_feature=feat)
    expected = _normalize(np.asarray(feat) @ params.proj_img)
    assert np.allclose(toy_entity_encode(params, e_img), expected, atol=1e-12)

    text_only = ToyEncoderParams(params.proj_img, params.proj_txt, 0.0)
    e_txt = EntityRecord("Q2", "y", "a small red bird")
    expected = _normalize(hash_bow("a small red bird") @ params.proj_txt)
    assert np.allclose(toy_entity_encode(text_only, e_txt), expected, atol=1e-12)

    img_only = ToyEncoderParams(params.proj_img, params.proj_txt, 1.0)
    both = EntityRecord("Q3", "z", "ignored at blend one", image_feature=feat)
    assert np.allclose(toy_entity_encode(img_only, both), _normalize(np.asarray(feat) @ params.proj_img), atol=1e-12)


def test_mixed_entity(params):
    feat = np.ones(6)
    e = EntityRecord("Q1", "x", "tall tower", image_feature=tuple(feat))
    raw = params.blend * (feat @ params.proj_img) + (1 - params.blend) * (hash_bow("tall tower") @ params.proj_txt)
    assert np.allclose(toy_entity_encode(params, e), _normalize(raw), atol=1e-12)


def test_missing_features(params):
    with pytest.raises(MissingFeatureError):
        toy_entity_encode(params, EntityRecord("Q1", "x", ""))


def test_determinism(params):
    a = EntityRecord("Q1", "x", "same words", image_feature=(1.0,) * 6)
    b = EntityRecord("Q2", "y", "same words", image_feature=(1.0,) * 6)
    assert np.array_equal(toy_entity_encode(params, a), toy_entity_encode(params, b))
    q = QueryRecord("q1", "what is this?", (0.5,) * 6, "Q1")
    assert np.array_equal(toy_query_encode(params, q), toy_query_encode(params, q))


def test_query_depends_on_image_only_at_blend_one(params):
    p = ToyEncoderParams(params.proj_img, params.proj_txt, 1.0)
    feat = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6)
    enc = ToyEncoder(p)
    assert np.array_equal(enc.query_encode("", feat), enc.query_encode("completely different words", feat))


def test_unit_norm_random_queries(rng, params):
    for i in range(100):
        feat = tuple(rng.standard_normal(6))
        words = " ".join(f"w{int(x)}" for x in rng.integers(0, 50, size=int(rng.integers(0, 8))))
        v = toy_query_encode(params, QueryRecord(f"q{i}", words, feat, "Q1"))
        assert abs(np.linalg.norm(v) - 1.0) <= 1e-6
        assert np.all(np.isfinite(v))


def test_gradient_check(rng):
    d_img, d, n = 4, 3, 5
    params = ToyEncoderParams.init(d_img, d, rng, blend=0.6)
    img = rng.standard_normal((n, d_img))
    has_img = np.array([True, True, False, True, True])
    bow = np.stack([hash_bow(s) for s in ["a b", "c", "d e f", "", "g"]])
    E = unit_rows(rng, n, d)

    def loss():
        unit, _ = encode_batch(params, img, has_img, bow)
        return infonce_loss(unit, E, np.log(0.2))[0]

    unit, cache = encode_batch(params, img, has_img, bow)
    _, g = infonce_loss(unit, E, np.log(0.2))
    grads = encode_backward(params, cache, g["Q"])

    assert max_rel_error(grads["proj_img"], central_difference(loss, params.proj_img)) < 1e-5
    used = np.flatnonzero(bow.any(axis=0))
    cols = [int(r) * d + c for r in used for c in range(d)]
    assert max_rel_error(grads["proj_txt"], central_difference(loss, params.proj_txt, cols)) < 1e-5
    # untouched hash rows must have zero gradient
    assert not np.delete(grads["proj_txt"], used, axis=0).any()

    holder = np.array([params.blend])

    def loss_blend():
        params.blend = float(holder[0])
        return loss()

    num = central_difference(loss_blend, holder)
    assert max_rel_error(np.array([grads["blend"]]), num) < 1e-5
