import numpy as np
import pytest

from narrowlab.config import ModelConfig
from narrowlab.denoiser import ConditioningMode, Denoiser, is_phase1_param, timestep_embedding
from narrowlab.numerics import make_rng
from narrowlab.scoring import SelectedFeatures

CFG = ModelConfig()
MODEL = Denoiser(CFG)


def inputs(rng, B=2):
    z = rng.normal(size=(B, 8, 8, 12))
    f_ct = rng.normal(size=(B, CFG.n_tokens, CFG.text_dim))
    f_ci = rng.normal(size=(B, 5, CFG.image_dim))
    return z, f_ct, f_ci


def test_output_shape_and_record_count_for_every_mode():
    rng = make_rng(0)
    z, f_ct, f_ci = inputs(rng)
    scope = rng.random((2, 8, 8))
    modes = [ConditioningMode("uncond"), ConditioningMode("text_only"),
             ConditioningMode("text_and_image", f_ci),
             ConditioningMode("text_and_image_masked", f_ci, scope)]
    for mode in modes:
        eps, recs = MODEL.denoise(z, np.array([10, 900]), f_ct, mode)
        assert eps.shape == z.shape
        assert len(recs) == MODEL.n_attention_blocks == 3
        assert [r.block_id for r in recs] == [0, 1, 2]
        assert [r.resolution for r in recs] == [(8, 8), (4, 4), (8, 8)]


def test_mode_discipline():
    with pytest.raises(ValueError, match="scope"):
        ConditioningMode("text_only", scope=np.ones((1, 8, 8)))
    with pytest.raises(ValueError, match="image features"):
        ConditioningMode("text_and_image")
    with pytest.raises(ValueError, match="image features"):
        ConditioningMode("uncond", features=np.ones((1, 2, 3)))
    with pytest.raises(ValueError, match="unknown"):
        ConditioningMode("image_only")


def test_full_scope_matches_unmasked_dual_bitwise():
    rng = make_rng(1)
    z, f_ct, f_ci = inputs(rng)
    sel = SelectedFeatures(f_ci, np.tile(np.arange(5), (2, 1)), 1.0)
    a, ra = MODEL.denoise(z, 400, f_ct, ConditioningMode("text_and_image", sel))
    b, rb = MODEL.denoise(z, 400, f_ct, ConditioningMode("text_and_image_masked", sel, np.ones((2, 8, 8))))
    np.testing.assert_array_equal(a.data, b.data)
    for x, y in zip(ra, rb):
        np.testing.assert_array_equal(x.map, y.map)


def test_empty_scope_matches_text_only_bitwise():
    rng = make_rng(2)
    z, f_ct, f_ci = inputs(rng)
    a, _ = MODEL.denoise(z, 400, f_ct, ConditioningMode("text_only"))
    b, _ = MODEL.denoise(z, 400, f_ct, ConditioningMode("text_and_image_masked", f_ci, np.zeros((2, 8, 8))))
    np.testing.assert_array_equal(a.data, b.data)


def test_shape_error():
    with pytest.raises(ValueError, match="latent shape"):
        MODEL.denoise(np.zeros((1, 4, 4, 12)), 1, np.zeros((1, 8, 32)), ConditioningMode("text_only"))


def test_trainable_sets_per_phase():
    m = Denoiser(CFG)
    names = set(m.params)
    p1 = {p.name for p in m.set_phase(1)}
    expected = {n for n in names if n.startswith("scoring.")} | {
        f"{prefix}.{w}" for prefix, _ in m.attn_blocks for w in ("W_Ki", "W_Vi")}
    assert p1 == expected
    assert "null_text" not in p1 and "down.0.0.W_Q" not in p1
    p0 = {p.name for p in m.set_phase(0)}
    assert p0 == names - expected
    assert {p.name for p in m.trainable()} == p0
    m.freeze()
    assert m.trainable() == []
    with pytest.raises(ValueError):
        m.set_phase(2)
    assert all(is_phase1_param(n) for n in expected)


def test_uncond_ignores_text_features():
    rng = make_rng(3)
    z, f_ct, _ = inputs(rng)
    a, _ = MODEL.denoise(z, 300, f_ct, ConditioningMode("uncond"))
    b, _ = MODEL.denoise(z, 300, None, ConditioningMode("uncond"))
    np.testing.assert_array_equal(a.data, b.data)


def test_timestep_embedding_shape_and_range():
    e = timestep_embedding(np.array([0, 500, 1000]), 32)
    assert e.shape == (3, 32)
    assert np.all(np.abs(e) <= 1.0)
    np.testing.assert_array_equal(e[0, :16], 0.0)
