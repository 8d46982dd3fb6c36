import numpy as np
import pytest

from pcotta import autodiff as ad
from pcotta import geometry as geo
from pcotta import model as mdl
from pcotta import tasks as tk
from pcotta.errors import ConfigError, ShapeError, SizeError
from pcotta.model import MaskMode, MaskSpec, ModelDims, MPMModel

TOY = ModelDims(M=4, C=8, g=4, hidden=8)


def _cloud(seed, n=64, category="box"):
    return geo.generate_shape(geo.ShapeSpec(category, "SRC_A", seed, n))


def _sample(seed, n=64):
    s = tk.build_pretrain_set(n_per_domain=3, seed=seed, n_points=n)
    return s[0]


# ---- encoder


def test_encode_shape_and_permutation_invariance():
    model = MPMModel(ModelDims(M=8, C=16, g=8, hidden=16), seed=1)
    c = _cloud(0)
    a = mdl.encode_features(model, c)
    perm = np.random.default_rng(3).permutation(len(c))
    b = mdl.encode_features(model, c[perm])
    assert a.shape == (8, 16)
    np.testing.assert_array_equal(a, b)


def test_encode_non_degenerate():
    model = MPMModel(ModelDims(M=8, C=16, g=8, hidden=16), seed=1)
    a = mdl.encode_features(model, _cloud(0, category="box"))
    b = mdl.encode_features(model, _cloud(0, category="torus"))
    assert np.linalg.norm(a - b) > 1e-6


def test_encode_too_few_points():
    with pytest.raises(SizeError):
        mdl.encode(np.zeros((3, 3)), MPMModel(TOY))


def test_model_dims_validated():
    with pytest.raises(ConfigError):
        ModelDims(M=0)


# ---- context and masks


def _seq(M=4, C=8, seed=0):
    rng = np.random.default_rng(seed)
    parts = [mdl.TokenSequence(ad.Tensor(rng.normal(size=(M, C))), [(r, 0, M)]) for r in mdl.ROLES]
    return parts, mdl.concat_context(*parts)


def test_concat_context_layout_and_split():
    parts, seq = _seq()
    assert seq.rows == 16
    np.testing.assert_array_equal(seq.tokens.data[4:8], parts[1].tokens.data)
    np.testing.assert_array_equal(seq.block("query_target").data, parts[1].tokens.data)
    back = seq.split()
    assert [b.roles[0][0] for b in back] == list(mdl.ROLES)
    for b, p in zip(back, parts):
        np.testing.assert_array_equal(b.tokens.data, p.tokens.data)


def test_concat_context_width_mismatch():
    parts, _ = _seq()
    parts[2] = mdl.TokenSequence(ad.Tensor(np.zeros((4, 5))))
    with pytest.raises(ShapeError):
        mdl.concat_context(*parts)


def test_test_time_mask_only_touches_query_target():
    _, seq = _seq()
    tok = np.full(8, 7.0)
    out = mdl.apply_mask(seq, MaskSpec.test_time(4), tok).data
    np.testing.assert_array_equal(out[4:8], 7.0)
    np.testing.assert_array_equal(out[:4], seq.tokens.data[:4])
    np.testing.assert_array_equal(out[8:], seq.tokens.data[8:])
    assert MaskSpec.test_time(4).mode is MaskMode.TEST_TIME


def test_empty_mask_is_identity():
    _, seq = _seq()
    np.testing.assert_array_equal(mdl.apply_mask(seq, MaskSpec.empty(4), np.zeros(8)).data, seq.tokens.data)


def test_pretrain_mask_count():
    # 0.7 * 64 = 44.8 -> 45 by round-to-nearest
    assert mdl.masked_count(64) == 45
    for s in range(5):
        m = MaskSpec.pretrain(16, np.random.default_rng(s))
        assert m.mask.sum() in (44, 45)
        assert m.mode is MaskMode.PRETRAIN


def test_mask_length_mismatch():
    _, seq = _seq()
    with pytest.raises(ShapeError):
        mdl.apply_mask(seq, np.zeros(10, bool), np.zeros(8))


# ---- forward and gradients


def test_forward_shape_and_mask_dependence():
    model = MPMModel(TOY, seed=0)
    ctx = mdl.prepare_context(_sample(0), TOY)
    seq = mdl.context_tokens(model, ctx)
    out = mdl.forward(model, mdl.apply_mask(seq, MaskSpec.test_time(4), model["phi.mask_token"]), ctx.centers)
    assert out.shape == (4, 4, 3)
    rng = np.random.default_rng(0)
    a = mdl.forward(model, mdl.apply_mask(seq, MaskSpec.pretrain(4, rng), model["phi.mask_token"]), ctx.centers)
    b = mdl.forward(model, mdl.apply_mask(seq, MaskSpec.pretrain(4, rng), model["phi.mask_token"]), ctx.centers)
    assert np.abs(a.data - b.data).max() > 1e-6


def _generic(model, seed):
    # zero-init biases put patch centres (relative coordinate 0) exactly on a relu kink
    rng = np.random.default_rng(seed)
    for p in model.parameters():
        p.assign(p.data + rng.normal(scale=0.05, size=p.shape).astype(np.float32))
    return model


@pytest.mark.parametrize("seed", range(3))
def test_masked_loss_gradient_matches_finite_differences(seed):
    model = _generic(MPMModel(TOY, seed=seed), seed)
    ctx = mdl.prepare_context(_sample(seed), TOY)
    batch = mdl.ContextGeometry(ctx.groups[None], ctx.centers[None])
    masks = MaskSpec.pretrain(4, np.random.default_rng(seed)).mask[None]
    err = ad.finite_diff_check(lambda: mdl.masked_patch_loss(model, batch, masks), model.parameters())
    assert err < 1e-3


# ---- pretraining and persistence


def test_pretrain_zero_epochs_leaves_model_unchanged():
    model = MPMModel(TOY, seed=0)
    before = model.checksum()
    assert mdl.pretrain(model, [_sample(0)], epochs=0) == []
    assert model.checksum() == before


def test_pretrain_empty_samples():
    with pytest.raises(ConfigError):
        mdl.pretrain(MPMModel(TOY), [], epochs=1)


def test_pretrain_reduces_loss():
    dims = ModelDims(M=8, C=16, g=8, hidden=16)
    samples = tk.build_pretrain_set(n_per_domain=12, seed=0, n_points=64)
    model = MPMModel(dims, seed=0)
    trace = mdl.pretrain(model, samples, epochs=8, batch_size=8, lr=3e-3)
    assert len(trace) == 8
    assert trace[-1] < trace[0]


def test_save_load_round_trip_and_dims_check(tmp_path):
    model = MPMModel(TOY, seed=4)
    model.save(tmp_path / "m")
    back = MPMModel.load(tmp_path / "m", expected=TOY)
    assert back.checksum() == model.checksum()
    with pytest.raises(ConfigError, match="do not match"):
        MPMModel.load(tmp_path / "m", expected=ModelDims(M=4, C=16, g=4, hidden=8))
