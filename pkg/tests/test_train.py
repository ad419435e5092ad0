import numpy as np
import pytest

from hexburst.errors import ConfigError, NumericalError, ShapeError
from hexburst.model import init_params, load_checkpoint, preset
from hexburst.train import (
    PreparedBurst, TrainConfig, burst_flows, curve_csv, prepare, sample_batch, train,
)

MICRO = preset("micro")


def _quick(**kw):
    base = dict(steps=5, batch=2, crop=32, lr=1e-3, checkpoint_every=2, seed=3)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def prepared(small_bursts):
    return prepare(small_bursts)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(crop=40)
    with pytest.raises(ConfigError):
        TrainConfig(batch=0)
    with pytest.raises(ConfigError):
        TrainConfig(flow_source="magic")
    d = TrainConfig(lr=3e-4).to_json()
    assert TrainConfig.from_json(d) == TrainConfig(lr=3e-4)
    assert TrainConfig().lr == 1e-4 and TrainConfig().w_lab == 0.1


def test_true_flows_are_quarter_scale_shifts(small_bursts):
    b = small_bursts[1]
    f = burst_flows(b, "true")
    assert f.shape == (3, 2, 16, 16)
    for i in range(3):
        dx, dy = b.shifts[i + 1]
        assert np.all(f[i, 0] == np.float32(dx / 4)) and np.all(f[i, 1] == np.float32(dy / 4))
    with pytest.raises(ConfigError):
        burst_flows(b, "net")


def test_sample_batch_alignment():
    H = W = 64
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float32)
    frames = np.stack([yy * 1000 + xx] * 4)
    fy, fx = np.mgrid[0:H // 4, 0:W // 4].astype(np.float32)
    flows = np.stack([np.stack([fx, fy])] * 3)
    ty, tx = np.mgrid[0:2 * H, 0:2 * W].astype(np.float32)
    target = np.stack([ty, tx, ty])
    p = [PreparedBurst(frames, flows, target)]
    fr, fl, tg = sample_batch(p, 16, 32, np.random.default_rng(0))
    for b in range(16):
        y0, x0 = divmod(int(fr[b, 0, 0, 0]), 1000)
        assert y0 % 8 == 0 and x0 % 8 == 0
        assert fl[b, 0, 1, 0, 0] == y0 // 4 and fl[b, 0, 0, 0, 0] == x0 // 4
        assert tg[b, 0, 0, 0] == 2 * y0 and tg[b, 1, 0, 0] == 2 * x0
    assert fl.shape == (16, 3, 2, 8, 8) and tg.shape == (16, 3, 64, 64)


def test_sample_batch_rejects_small_burst(prepared):
    with pytest.raises(ShapeError):
        sample_batch(prepared, 1, 128, np.random.default_rng(0))


def test_zero_steps_checkpoint_equals_init(prepared, tmp_path):
    res = train(MICRO, _quick(steps=0), prepared, out_dir=tmp_path)
    params, cfg, meta = load_checkpoint(tmp_path / "checkpoint")
    init = init_params(MICRO, seed=3)
    assert cfg == MICRO and meta["step"] == 0 and res.curve == []
    for k, v in init.items():
        assert np.array_equal(params[k].data, v.data) and np.array_equal(res.params[k].data, v.data)


def test_same_seed_same_curve(prepared):
    a = train(MICRO, _quick(steps=6), prepared)
    b = train(MICRO, _quick(steps=6), prepared)
    c = train(MICRO, _quick(steps=6, seed=4), prepared)
    assert a.curve == b.curve
    assert a.curve != c.curve


def test_loss_curve_csv_and_checkpoints(prepared, tmp_path):
    res = train(MICRO, _quick(steps=5, use_lab=True), prepared, out_dir=tmp_path)
    lines = (tmp_path / "loss_curve.csv").read_text().splitlines()
    assert lines[0] == "step,l1,lab,total" and len(lines) == 6
    step, l1, lab, total = lines[-1].split(",")
    assert int(step) == 5
    np.testing.assert_allclose(float(total), float(l1) + 0.1 * float(lab), rtol=1e-5)
    _, _, meta = load_checkpoint(tmp_path / "checkpoint")
    assert meta["step"] == 5 and meta["train_config"]["use_lab"]
    assert curve_csv(res.curve) == (tmp_path / "loss_curve.csv").read_text()


def test_loss_decreases_short_run(prepared):
    res = train(MICRO, _quick(steps=120, batch=4, lr=2e-3), prepared)
    c = [r[3] for r in res.curve]
    assert np.mean(c[-20:]) < np.mean(c[:20])


def test_nan_aborts_at_last_checkpoint(small_bursts, tmp_path):
    data = prepare(small_bursts)

    def poison(step, value):
        if step == 3:
            for p in data:
                p.target[...] = np.nan

    with pytest.raises(NumericalError) as ei:
        train(MICRO, _quick(steps=10), data, out_dir=tmp_path, on_step=poison)
    err = ei.value
    assert err.step == 2
    ck, _, meta = load_checkpoint(tmp_path / "checkpoint")
    assert meta["step"] == 2
    for k, v in err.params.items():
        assert np.all(np.isfinite(v.data))
        assert np.array_equal(v.data, ck[k].data)


def test_empty_dataset_rejected():
    with pytest.raises(ShapeError):
        train(MICRO, _quick(), [])
