import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hexburst.errors import ConfigError, FormatError, ShapeError, StageError
from hexburst.model import (
    ModelConfig, align_fuse, decode, encode, forward, init_params, load_checkpoint, param_count,
    param_shapes, preprocess, preset, save_checkpoint, symmetrize_fusion, upsample_head, zero_flows,
)
from hexburst.tensor import Tensor, abs_, mean, sum_
from hexburst.tensor.gradcheck import check_gradients

TINY = preset("tiny")
MICRO = preset("micro")


def _frames(n=4, hw=64, seed=0):
    return np.random.default_rng(seed).random((n, hw, hw)).astype(np.float32)


def _randomize(params, seed=0, scale=0.3):
    rng = np.random.default_rng(seed)
    for p in params.values():
        p.data[...] = rng.standard_normal(p.shape) * scale / np.sqrt(max(1, np.prod(p.shape[1:])))


# ------------------------------------------------------------------ config

def test_presets_match_reference_dims():
    s = preset("S")
    assert s.enc_dim == (32, 64, 128) and s.dec_dim == (256, 128, 64)
    assert s.enc_nb == s.dec_nb == (2, 4, 8) and s.depth == 3
    assert TINY.enc_dim == (8, 16, 32) and TINY.dec_dim == (32, 16, 8) and TINY.enc_nb == (1, 2, 2)


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(enc_dim=(8, 16), dec_dim=(16, 8, 4), enc_nb=(1, 1), dec_nb=(1, 1))
    with pytest.raises(ConfigError):
        ModelConfig(enc_nb=(0, 1, 1))
    with pytest.raises(ConfigError):
        preset("XL")


def test_config_json_round_trip():
    assert ModelConfig.from_json(json.loads(json.dumps(TINY.to_json()))) == TINY


# ------------------------------------------------------------------ param_count

def test_param_count_single_conv():
    assert param_count({"w": (8, 4, 3, 3), "b": (8,)}) == 296


def test_param_count_matches_init():
    params = init_params(TINY)
    assert param_count(TINY) == param_count(params) == sum(p.size for p in params.values())


def test_param_count_quadratic_in_width():
    def rb_params(cfg):
        return sum(np.prod(s) for k, s in param_shapes(cfg).items() if ".rb" in k)
    wide = ModelConfig(enc_dim=(16, 32, 64), dec_dim=(64, 32, 16), enc_nb=(1, 2, 2), dec_nb=(1, 2, 2))
    ratio = rb_params(wide) / rb_params(TINY)
    assert 3.9 < ratio <= 4.0


def test_parameter_names_unique_and_disjoint_encoders():
    names = list(param_shapes(TINY))
    assert len(names) == len(set(names))
    ref = {n.replace("enc.ref.", "") for n in names if n.startswith("enc.ref.")}
    non = {n.replace("enc.nonref.", "") for n in names if n.startswith("enc.nonref.")}
    assert ref == non and ref


# ------------------------------------------------------------------ preprocess

def test_preprocess_shape_and_constant():
    params = init_params(TINY)
    out = preprocess(np.ones((1, 1, 64, 64), dtype=np.float32), params)
    assert out.shape == (1, 8, 16, 16)
    params["pre.weight"].data[...] = 1.0 / 16
    params["pre.bias"].data[...] = 0.0
    out = preprocess(np.full((64, 64), 0.3, dtype=np.float32), params)
    np.testing.assert_allclose(out.data, 0.3, atol=1e-6)


def test_preprocess_block_locality():
    params = init_params(TINY)
    raw = _frames(1, 64)[0]
    base = preprocess(raw, params).data
    bumped = raw.copy()
    bumped[4 * 5 + 2, 4 * 7 + 1] += 1.0
    diff = np.abs(preprocess(bumped, params).data - base).max(axis=(0, 1))
    changed = np.argwhere(diff > 0)
    assert changed.tolist() == [[5, 7]]


def test_preprocess_rejects_indivisible():
    with pytest.raises(ShapeError):
        preprocess(np.zeros((60, 64)), init_params(TINY))


# ------------------------------------------------------------------ encode / align_fuse / decode / head

def test_encoder_pyramid_dims():
    params = init_params(TINY, zero_residual=False)
    feat = preprocess(_frames(1)[0], params)
    pyr = encode(feat, params, True, TINY)
    assert [p.shape for p in pyr] == [(1, 8, 16, 16), (1, 16, 8, 8), (1, 32, 4, 4)]


def test_encoders_use_disjoint_params():
    params = init_params(TINY, seed=1, zero_residual=False)
    feat = preprocess(_frames(1)[0], params)
    a = encode(feat, params, True, TINY)
    b = encode(feat, params, False, TINY)
    assert not np.allclose(a[-1].data, b[-1].data)


def test_encode_rejects_channel_mismatch():
    with pytest.raises(ShapeError):
        encode(Tensor(np.zeros((1, 5, 16, 16))), init_params(TINY), True, TINY)


def _averaging_fusion(params, cfg):
    # fused = mean over the N+1 groups, per channel (enc_dim == dec_dim width needed)
    for lev in range(cfg.depth):
        w = params[f"fuse.l{lev}.weight"].data
        C = cfg.enc_dim[lev]
        w[...] = 0.0
        for g in range(cfg.num_nonref + 1):
            w[np.arange(C), g * C + np.arange(C), 0, 0] = 1.0 / (cfg.num_nonref + 1)
        params[f"fuse.l{lev}.bias"].data[...] = 0.0


SQUARE = ModelConfig(enc_dim=(8, 16, 32), dec_dim=(32, 16, 8), enc_nb=(1, 1, 1), dec_nb=(1, 1, 1))


def test_align_fuse_average_of_identical_is_identity():
    params = init_params(SQUARE)
    _averaging_fusion(params, SQUARE)
    feat = preprocess(_frames(1)[0], params)
    pyr = encode(feat, params, True, SQUARE)
    flows = [np.zeros((2, 16, 16), np.float32)] * 3
    fused = align_fuse(pyr, [pyr] * 3, flows, params, SQUARE)
    for f, p in zip(fused, pyr):
        np.testing.assert_allclose(f.data, p.data, atol=1e-6)


def test_align_fuse_single_frame():
    cfg = ModelConfig(enc_dim=(8, 16, 32), dec_dim=(32, 16, 8), enc_nb=(1, 1, 1), dec_nb=(1, 1, 1), num_nonref=0)
    params = init_params(cfg)
    pyr = encode(preprocess(_frames(1)[0], params), params, True, cfg)
    fused = align_fuse(pyr, [], [], params, cfg)
    from hexburst.tensor import conv2d
    for lev in range(3):
        expect = conv2d(pyr[lev], params[f"fuse.l{lev}.weight"], params[f"fuse.l{lev}.bias"])
        np.testing.assert_array_equal(fused[lev].data, expect.data)


def test_align_fuse_rejects_wrong_count():
    params = init_params(TINY)
    pyr = encode(preprocess(_frames(1)[0], params), params, True, TINY)
    with pytest.raises(ShapeError):
        align_fuse(pyr, [pyr] * 2, [np.zeros((2, 16, 16))] * 2, params, TINY)


def _shift(a, dx, dy):
    return np.roll(np.roll(a, dy, axis=-2), dx, axis=-1)


def test_align_fuse_aligns_translated_features():
    params = init_params(SQUARE, seed=3)
    rng = np.random.default_rng(0)
    ref = [Tensor(rng.random((1, c, 16 >> l, 16 >> l)), dtype=np.float64)
           for l, c in enumerate(SQUARE.enc_dim)]
    for name in params:
        params[name] = Tensor(params[name].data, requires_grad=True, dtype=np.float64)
    dx, dy = 4, -4  # at 1/4 scale: whole pixels on every level
    moved = [Tensor(_shift(r.data, dx // 2 ** l, dy // 2 ** l)) for l, r in enumerate(ref)]
    flows = [FlowLike(dx, dy)] * 3
    aligned = align_fuse(ref, [moved] * 3, flows, params, SQUARE)
    same = align_fuse(ref, [ref] * 3, [np.zeros((2, 16, 16))] * 3, params, SQUARE)
    for l, (a, b) in enumerate(zip(aligned, same)):
        m = 4 >> l
        np.testing.assert_allclose(a.data[..., m:-m, m:-m], b.data[..., m:-m, m:-m], atol=1e-4)


def FlowLike(dx, dy, hw=(16, 16)):
    f = np.empty((2,) + hw, np.float32)
    f[0], f[1] = dx, dy
    return f


def test_decoder_shape_and_deep_gradient():
    params = init_params(TINY, zero_residual=False)
    rng = np.random.default_rng(1)
    fused = [Tensor(rng.standard_normal((1, c, 16 >> l, 16 >> l)), requires_grad=True)
             for l, c in enumerate(reversed(TINY.dec_dim))]
    out = decode(fused, params, TINY)
    assert out.shape == (1, TINY.dec_dim[-1], 16, 16)
    sum_(abs_(out)).backward()
    assert np.abs(fused[-1].grad).sum() > 0


def test_head_shape_and_zero_output():
    params = init_params(TINY)
    feat = Tensor(np.random.default_rng(2).random((1, 8, 16, 16)))
    out = upsample_head(feat, params)
    assert out.shape == (1, 3, 128, 128)
    params["head.out.weight"].data[...] = 0
    params["head.out.bias"].data[...] = 0
    assert not np.any(upsample_head(feat, params).data)


# ------------------------------------------------------------------ forward

def test_forward_shape_and_determinism():
    params = init_params(TINY)
    fr = _frames()
    a = forward(fr, zero_flows(TINY, (64, 64)), params, TINY)
    b = forward(fr, zero_flows(TINY, (64, 64)), params, TINY)
    assert a.shape == (1, 3, 128, 128)
    assert a.data.tobytes() == b.data.tobytes()


def test_forward_batched_matches_single():
    params = init_params(TINY, seed=2, zero_residual=False)
    fr = np.stack([_frames(seed=0), _frames(seed=1)])
    rng = np.random.default_rng(3)
    flows = rng.uniform(-1, 1, (2, 3, 2, 16, 16)).astype(np.float32)
    both = forward(fr, flows, params, TINY).data
    for b in range(2):
        one = forward(fr[b], [flows[b, i] for i in range(3)], params, TINY).data[0]
        np.testing.assert_allclose(both[b], one, rtol=1e-4, atol=1e-4 * np.abs(one).max())


def test_forward_nonref_permutation_symmetry():
    params = init_params(TINY, seed=4, zero_residual=False)
    symmetrize_fusion(params, TINY)
    f = _frames(1)[0]
    fr = np.stack([f, f, f, f])
    flows = zero_flows(TINY, (64, 64))
    a = forward(fr, flows, params, TINY).data
    b = forward(fr[[0, 2, 3, 1]], flows, params, TINY).data
    np.testing.assert_array_equal(a, b)


@settings(max_examples=5, deadline=None)
@given(seed=st.integers(0, 1000), perm=st.permutations([1, 2, 3]))
def test_forward_symmetric_fusion_invariant_to_slot_order(seed, perm):
    params = init_params(TINY, seed=seed, zero_residual=False)
    symmetrize_fusion(params, TINY)
    fr = _frames(seed=seed)
    rng = np.random.default_rng(seed)
    flows = rng.uniform(-1, 1, (3, 2, 16, 16)).astype(np.float32)
    a = forward(fr, list(flows), params, TINY).data
    p = [x - 1 for x in perm]
    b = forward(fr[[0] + list(perm)], list(flows[p]), params, TINY).data
    np.testing.assert_allclose(a, b, rtol=1e-4, atol=1e-4 * np.abs(a).max())


def test_forward_errors_name_stage():
    params = init_params(TINY)
    del params["dec.s0.rb0.conv1.weight"]
    with pytest.raises(StageError) as info:
        forward(_frames(), zero_flows(TINY, (64, 64)), params, TINY)
    assert info.value.stage == "decode"


def test_forward_rejects_bad_inputs():
    params = init_params(TINY)
    with pytest.raises(ShapeError):
        forward(_frames(3), zero_flows(TINY, (64, 64))[:2], params, TINY)
    with pytest.raises(ShapeError):
        forward(np.zeros((4, 56, 56)), zero_flows(TINY, (56, 56)), params, TINY)


def test_every_parameter_gets_gradient():
    params = init_params(TINY, seed=5, zero_residual=False)
    rng = np.random.default_rng(5)
    flows = rng.uniform(-1, 1, (3, 2, 16, 16)).astype(np.float32)
    out = forward(_frames(seed=5), list(flows), params, TINY)
    target = Tensor(rng.random(out.shape))
    mean(abs_(out - target)).backward()
    dead = [k for k, p in params.items() if p.grad is None or not np.any(p.grad)]
    assert dead == []


def test_end_to_end_gradcheck_micro():
    params = init_params(MICRO, seed=6, dtype=np.float64, zero_residual=False)
    rng = np.random.default_rng(6)
    frames = rng.random((4, 16, 16))
    flows = list(rng.uniform(-0.7, 0.7, (3, 2, 4, 4)))
    names = sorted(params)
    target = Tensor(rng.random((1, 3, 32, 32)), dtype=np.float64)

    def fn(*ts):
        p = dict(zip(names, ts))
        out = forward(frames, flows, p, MICRO)
        d = out - target
        return mean(d * d)

    ok, worst = check_gradients(fn, [params[n] for n in names], eps=1e-6, rtol=1e-3, max_entries=4)
    assert ok, worst


# ------------------------------------------------------------------ checkpoints

def test_checkpoint_round_trip(tmp_path):
    params = init_params(TINY, seed=7)
    save_checkpoint(tmp_path / "ck", params, TINY, step=12)
    loaded, cfg, meta = load_checkpoint(tmp_path / "ck")
    assert cfg == TINY and meta["step"] == 12
    assert set(loaded) == set(params)
    for k in params:
        np.testing.assert_array_equal(loaded[k].data, params[k].data)
    meta_json = json.loads((tmp_path / "ck" / "checkpoint.json").read_text())
    assert meta_json["params"]["pre.weight"] == [8, 1, 4, 4]


def test_checkpoint_overwrite_is_clean(tmp_path):
    save_checkpoint(tmp_path / "ck", init_params(TINY, seed=1), TINY, step=1)
    save_checkpoint(tmp_path / "ck", init_params(TINY, seed=2), TINY, step=2)
    _, _, meta = load_checkpoint(tmp_path / "ck")
    assert meta["step"] == 2
    assert [p.name for p in tmp_path.iterdir()] == ["ck"]


def test_checkpoint_missing_meta(tmp_path):
    (tmp_path / "empty").mkdir()
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "empty")
