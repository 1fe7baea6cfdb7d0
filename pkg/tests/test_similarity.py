import math

import numpy as np
import pytest
import torch

from protoseg.prototype import GLOBAL, Prototype, PrototypeError
from protoseg.similarity import (
    COSINE_SCALE,
    ClassSimilarity,
    fuse_similarities,
    local_similarity_maps,
    predict_probabilities,
)

from helpers import random_features


def proto(vec, class_id=1):
    return Prototype(vector=torch.as_tensor(vec, dtype=torch.float32), class_id=class_id, kind=GLOBAL)


def test_similarity_bounded_by_scale():
    rng = np.random.default_rng(0)
    for _ in range(50):
        d = int(rng.integers(1, 8))
        feats = random_features(rng, d, 5, 7)
        protos = [proto(rng.standard_normal(d)) for _ in range(3)]
        sims = local_similarity_maps(protos, feats)
        assert sims.shape == (3, 5, 7)
        assert torch.all(sims.abs() <= COSINE_SCALE + 1e-6)


def test_aligned_vector_hits_scale():
    v = torch.tensor([3.0, 4.0])
    feats = (10 * v).reshape(2, 1, 1)
    sims = local_similarity_maps([proto(v)], feats)
    assert float(sims) == pytest.approx(COSINE_SCALE, abs=1e-4)
    anti = local_similarity_maps([proto(-v)], feats)
    assert float(anti) == pytest.approx(-COSINE_SCALE, abs=1e-4)


def test_zero_vectors_stay_finite():
    feats = torch.zeros(3, 4, 4)
    sims = local_similarity_maps([proto(torch.zeros(3))], feats)
    assert torch.isfinite(sims).all()
    assert torch.all(sims == 0)


def test_dimension_mismatch_errors():
    feats = torch.randn(3, 4, 4)
    with pytest.raises(PrototypeError, match="dimension"):
        local_similarity_maps([proto(torch.randn(5))], feats)
    with pytest.raises(PrototypeError, match="at least one"):
        local_similarity_maps([], feats)


def test_single_prototype_fusion_is_identity():
    rng = np.random.default_rng(1)
    maps = torch.from_numpy(rng.standard_normal((1, 6, 6)) * 20)
    fused = fuse_similarities(maps)
    torch.testing.assert_close(fused, maps[0])


def test_two_prototype_fusion_closed_form():
    rng = np.random.default_rng(2)
    for _ in range(100):
        a, b = rng.uniform(-20, 20, size=2)
        maps = torch.tensor([[[a]], [[b]]], dtype=torch.float64)
        fused = float(fuse_similarities(maps))
        ea, eb = math.exp(a), math.exp(b)
        expected = (a * ea + b * eb) / (ea + eb)
        assert fused == pytest.approx(expected, abs=1e-6)


def test_fusion_between_min_and_max():
    rng = np.random.default_rng(3)
    maps = torch.from_numpy(rng.uniform(-20, 20, size=(5, 4, 4)))
    fused = fuse_similarities(maps)
    assert torch.all(fused <= maps.max(dim=0).values + 1e-9)
    assert torch.all(fused >= maps.min(dim=0).values - 1e-9)


def test_fusion_rejects_empty_stack():
    with pytest.raises(PrototypeError, match="non-empty"):
        fuse_similarities(torch.zeros(0, 4, 4))


def test_probabilities_sum_to_one():
    rng = np.random.default_rng(4)
    sims = [
        ClassSimilarity(class_id=c, fused=torch.from_numpy(rng.uniform(-20, 20, (6, 6))))
        for c in (0, 1, 2)
    ]
    res = predict_probabilities(sims)
    totals = res.probabilities.sum(dim=0)
    assert torch.all((totals - 1.0).abs() < 1e-5)
    up = predict_probabilities(sims, output_size=(17, 23))
    assert up.probabilities.shape == (3, 17, 23)
    assert torch.all((up.probabilities.sum(dim=0) - 1.0).abs() < 1e-5)
    assert up.resolution == (17, 23)


def test_argmax_matches_fused_argmax():
    rng = np.random.default_rng(5)
    fused = [torch.from_numpy(rng.uniform(-20, 20, (8, 8))) for _ in range(3)]
    sims = [ClassSimilarity(class_id=c, fused=f) for c, f in zip((0, 1, 2), fused)]
    res = predict_probabilities(sims)
    want = torch.stack(fused).argmax(dim=0).numpy()
    got = res.probabilities.argmax(dim=0).numpy()
    np.testing.assert_array_equal(got, want)


def test_prediction_uses_class_id_lut():
    fg = torch.full((1, 2, 2), 5.0)
    fg[0, 0, 0] = -5.0
    bg = torch.zeros(1, 2, 2)
    res = predict_probabilities(
        [ClassSimilarity(0, bg[0]), ClassSimilarity(7, fg[0])]
    )
    pred = res.prediction
    assert set(np.unique(pred)) == {0, 7}
    assert pred[0, 0] == 0
    assert pred[1, 1] == 7
    fgp = res.foreground_probability(7)
    assert fgp.shape == (2, 2)
    assert fgp[1, 1] > 0.5 > fgp[0, 0]


def test_needs_two_classes():
    one = [ClassSimilarity(1, torch.zeros(4, 4))]
    with pytest.raises(PrototypeError, match="two classes"):
        predict_probabilities(one)


def test_shape_disagreement_errors():
    sims = [
        ClassSimilarity(0, torch.zeros(4, 4)),
        ClassSimilarity(1, torch.zeros(5, 4)),
    ]
    with pytest.raises(PrototypeError, match="disagree"):
        predict_probabilities(sims)


def test_accepts_feature_map_wrapper():
    from protoseg.encoder import FeatureMap

    feats = torch.randn(2, 3, 3)
    fmap = FeatureMap(values=feats, stride=4.0, source_shape=(12, 12))
    p = [proto(torch.randn(2))]
    torch.testing.assert_close(
        local_similarity_maps(p, fmap), local_similarity_maps(p, feats)
    )
