"""Synthetic training loop for the burst model."""

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import ftr1
from .errors import ConfigError, NumericalError, ShapeError
from .losses import combined_loss
from .model import copy_params, forward, init_params, save_checkpoint
from .pyrflow import FLOW_SCALE, cosine_lr, estimate_flows, oracle_flow, raw_to_flowinput
from .tensor import AdamW

log = logging.getLogger(__name__)

FLOW_SOURCES = ("true", "blockmatch", "net")
SCHEDULES = ("constant", "cosine")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch: int = 4
    crop: int = 64
    lr: float = 1e-4
    weight_decay: float = 0.01
    w_l1: float = 1.0
    w_lab: float = 0.1
    use_lab: bool = False
    checkpoint_every: int = 500
    seed: int = 0
    flow_source: str = "true"
    max_disp: int = 8
    schedule: str = "constant"

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError("steps must be non-negative")
        if self.batch <= 0:
            raise ConfigError("batch must be positive")
        if self.crop <= 0 or self.crop % 16:
            raise ConfigError(f"crop {self.crop} must be a positive multiple of 16")
        if self.flow_source not in FLOW_SOURCES:
            raise ConfigError(f"flow_source must be one of {FLOW_SOURCES}")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}")

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, d):
        return cls(**d)


def burst_flows(burst, source="true", flow_params=None, max_disp=8):
    """(N, 2, H/4, W/4) flows aligning each non-reference frame onto frame 0."""
    H, W = burst.frames[0].values.shape
    hw = (H // 4, W // 4)
    n = len(burst.frames) - 1
    if source == "true":
        out = np.empty((n, 2) + hw, dtype=np.float32)
        for i in range(n):
            dx, dy = np.asarray(burst.shifts[i + 1]) * FLOW_SCALE
            out[i, 0], out[i, 1] = dx, dy
        return out
    ref = raw_to_flowinput(burst.frames[0])
    others = [raw_to_flowinput(f) for f in burst.frames[1:]]
    if source == "blockmatch":
        return np.stack([oracle_flow(ref, o, max_disp).data for o in others]) if n else np.zeros((0, 2) + hw, np.float32)
    if source == "net":
        if flow_params is None:
            raise ConfigError("flow_source 'net' needs flow network params")
        return np.stack([f.data for f in estimate_flows(ref, others, flow_params)]) if n else np.zeros((0, 2) + hw, np.float32)
    raise ConfigError(f"unknown flow source {source!r}")


@dataclass
class PreparedBurst:
    frames: np.ndarray  # (F, H, W)
    flows: np.ndarray   # (N, 2, H/4, W/4)
    target: np.ndarray  # (3, 2H, 2W)


def prepare(bursts, source="true", flow_params=None, max_disp=8, targets=None):
    """Stack frames, compute flows once, and pair each burst with its target."""
    out = []
    for k, b in enumerate(bursts):
        tgt = b.gt if targets is None else targets[k]
        out.append(PreparedBurst(b.stack().astype(np.float32),
                                 burst_flows(b, source, flow_params, max_disp),
                                 np.array(tgt, dtype=np.float32)))
    return out


def sample_batch(prepared, batch, crop, rng):
    """Random aligned crops: offsets are multiples of 8 raw px so the CFA phase
    and the 1/4-scale flow grid both line up."""
    idx = rng.integers(0, len(prepared), batch)
    frames, flows, targets = [], [], []
    for i in idx:
        p = prepared[i]
        H, W = p.frames.shape[1:]
        if H < crop or W < crop:
            raise ShapeError(f"burst {H}x{W} smaller than crop {crop}")
        y = 8 * int(rng.integers(0, (H - crop) // 8 + 1))
        x = 8 * int(rng.integers(0, (W - crop) // 8 + 1))
        frames.append(p.frames[:, y:y + crop, x:x + crop])
        flows.append(p.flows[:, :, y // 4:(y + crop) // 4, x // 4:(x + crop) // 4])
        targets.append(p.target[:, 2 * y:2 * (y + crop), 2 * x:2 * (x + crop)])
    return np.stack(frames), np.stack(flows), np.stack(targets)


@dataclass
class TrainResult:
    params: dict
    curve: list = field(default_factory=list)  # rows (step, l1, lab, total)
    checkpoint: Path = None


def curve_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "l1", "lab", "total"])
    for step, l1, lab, total in rows:
        w.writerow([step, repr(l1), "" if lab is None else repr(lab), repr(total)])
    return buf.getvalue()


def _save(out_dir, params, cfg, tcfg, step, rows):
    if out_dir is None:
        return None
    out_dir = Path(out_dir)
    ck = save_checkpoint(out_dir / "checkpoint", params, cfg, step=step,
                         extra={"train_config": tcfg.to_json()})
    ftr1.atomic_write_text(out_dir / "loss_curve.csv", curve_csv(rows))
    return ck


def train(cfg, tcfg, prepared, params=None, out_dir=None, on_step=None):
    """AdamW on ``w_l1 * L1 (+ w_lab * CIELAB)``; flows stay fixed.

    ``prepared`` is a list of PreparedBurst (see ``prepare``). On a
    non-finite loss the params of the last checkpoint are restored and
    NumericalError is raised.
    """
    if not prepared:
        raise ShapeError("training needs a non-empty dataset")
    params = init_params(cfg, seed=tcfg.seed) if params is None else copy_params(params)
    rng = np.random.default_rng(tcfg.seed)
    opt = AdamW(params, lr=tcfg.lr, weight_decay=tcfg.weight_decay)
    w_lab = tcfg.w_lab if tcfg.use_lab else 0.0
    rows = []
    last_good = {k: v.data.copy() for k, v in params.items()}
    last_step = 0
    ck = _save(out_dir, params, cfg, tcfg, 0, rows)
    for step in range(1, tcfg.steps + 1):
        if tcfg.schedule == "cosine":
            opt.state.lr = cosine_lr(tcfg.lr, step - 1, tcfg.steps)
        frames, flows, target = sample_batch(prepared, tcfg.batch, tcfg.crop, rng)
        out = forward(frames, flows, params, cfg)
        total, l1, lab = combined_loss(out, target, tcfg.w_l1, w_lab)
        value = float(total.data)
        try:
            if not np.isfinite(value):
                raise NumericalError(f"training loss became {value} at step {step}")
            opt.zero_grad()
            total.backward()
            opt.step()
        except NumericalError as exc:
            for k, v in params.items():
                v.data[...] = last_good[k]
            err = NumericalError(f"{exc}; restored step {last_step}")
            err.params = params
            err.step = last_step
            raise err from exc
        rows.append((step, float(l1.data), None if lab is None else float(lab.data), value))
        if on_step is not None:
            on_step(step, value)
        if step % tcfg.checkpoint_every == 0 or step == tcfg.steps:
            last_good = {k: v.data.copy() for k, v in params.items()}
            last_step = step
            ck = _save(out_dir, params, cfg, tcfg, step, rows)
            log.info("step %d loss %.5f", step, value)
    return TrainResult(params, rows, ck)


def predict(params, cfg, frames, flows):
    """Inference on one burst (F, H, W) -> (3, 2H, 2W) array."""
    return forward(frames[None], flows[None], params, cfg).data[0]


def save_json(path, obj):
    ftr1.atomic_write_text(path, json.dumps(obj, indent=1, sort_keys=True))
