"""Knowledge distillation onto a second degradation domain.

A teacher runs inference on domain-B bursts and its outputs become the
pseudo ground truth a student is trained against (L1 + CIELAB). The two-step
variant first refines a second, independently pretrained teacher on the
teacher-1 pseudo-GT and then distils the student from that second teacher.
"""

import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import ftr1
from .errors import ConfigError, HexburstError, ShapeError, StageError
from .evalkit import psnr
from .losses import l1_loss
from .model import forward, load_checkpoint, param_shapes
from .train import TrainConfig, prepare, save_json, train

log = logging.getLogger(__name__)


def _resolve(model):
    """Accept a checkpoint directory or a ``(params, cfg)`` pair."""
    if isinstance(model, (str, Path)):
        params, cfg, _ = load_checkpoint(model)
        return params, cfg
    params, cfg = model
    return params, cfg


def check_compatible(teacher_cfg, student_cfg):
    """Teacher and student must consume and produce the same shapes."""
    if teacher_cfg.num_nonref != student_cfg.num_nonref:
        raise ShapeError(f"teacher takes {teacher_cfg.num_nonref + 1} frames, "
                         f"student takes {student_cfg.num_nonref + 1}")
    if teacher_cfg.sr_scale != student_cfg.sr_scale:
        raise ShapeError(f"teacher scale x{teacher_cfg.sr_scale} != student scale x{student_cfg.sr_scale}")


def _fingerprint(params, prepared):
    h = hashlib.sha1()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k].data).tobytes())
    for p in prepared:
        h.update(np.ascontiguousarray(p.frames).tobytes())
        h.update(np.ascontiguousarray(p.flows).tobytes())
    return h.hexdigest()[:16]


def pseudo_gt(params, cfg, prepared, cache_dir=None):
    """Teacher inference on each full burst; cached as FTR1 keyed by a weights+inputs hash."""
    cache = None
    if cache_dir is not None:
        cache = Path(cache_dir) / f"pseudo_{_fingerprint(params, prepared)}"
        cache.mkdir(parents=True, exist_ok=True)
    out = []
    for k, p in enumerate(prepared):
        path = None if cache is None else cache / f"{k:04d}.ftr"
        if path is not None and path.exists():
            out.append(ftr1.load(path))
            continue
        y = forward(p.frames[None], p.flows[None], params, cfg).data[0]
        if path is not None:
            ftr1.save(path, y)
        out.append(y)
    return out


def with_targets(prepared, targets):
    return [replace(p, target=np.array(t, dtype=np.float32)) for p, t in zip(prepared, targets)]


def distill_step(teacher, student_params, student_cfg, domain_b, tcfg, cache_dir=None,
                 out_dir=None, on_step=None):
    """Train ``student_params`` against teacher pseudo-GT on ``domain_b``.

    ``teacher`` is a checkpoint directory or ``(params, cfg)``; ``domain_b`` a
    list of PreparedBurst (their targets are replaced). The loss always
    includes the CIELAB term. Returns ``(TrainResult, pseudo_targets)``.
    """
    t_params, t_cfg = _resolve(teacher)
    check_compatible(t_cfg, student_cfg)
    if not domain_b:
        raise ShapeError("distillation needs a non-empty domain-B set")
    targets = pseudo_gt(t_params, t_cfg, domain_b, cache_dir)
    tcfg = replace(tcfg, use_lab=True)
    res = train(student_cfg, tcfg, with_targets(domain_b, targets), params=student_params,
                out_dir=out_dir, on_step=on_step)
    return res, targets


def val_loss(params, cfg, prepared, targets):
    """Mean full-frame L1 of the model's outputs against ``targets``."""
    vals = [float(l1_loss(forward(p.frames[None], p.flows[None], params, cfg).data[0], t).data)
            for p, t in zip(prepared, targets)]
    return float(np.mean(vals))


def mean_psnr(params, cfg, prepared, targets):
    vals = [psnr(np.clip(forward(p.frames[None], p.flows[None], params, cfg).data[0], 0, 1), t)
            for p, t in zip(prepared, targets)]
    return float(np.mean(vals))


@dataclass
class DistillPlan:
    """Everything the two-step procedure needs.

    ``teacher1`` and ``teacher2`` are checkpoints or ``(params, cfg)`` pairs
    with identical configs but different (synthetic) pretraining.
    ``student`` is the student's synthetic-pretrained ``(params, cfg)``.
    ``domain_b`` / ``domain_b_val`` are prepared bursts whose targets hold the
    clean ground truth (only used for the PSNR fields of the report).
    """

    teacher1: object
    teacher2: object
    student: object
    domain_b: list
    domain_b_val: list
    steps_a: int = 300
    steps_b: int = 300
    tcfg: TrainConfig = field(default_factory=TrainConfig)
    synthetic_seeds: tuple = ()
    domain_b_seeds: tuple = ()

    def validate(self):
        t1p, t1c = _resolve(self.teacher1)
        t2p, t2c = _resolve(self.teacher2)
        sp, sc = _resolve(self.student)
        if t1c != t2c:
            raise ConfigError("teacher1 and teacher2 must share one architecture")
        check_compatible(t1c, sc)
        if set(param_shapes(sc)) != set(sp):
            raise ConfigError("student params do not match the student config")
        if self.steps_a < 0 or self.steps_b < 0:
            raise ConfigError("phase step counts must be non-negative")
        if not self.domain_b or not self.domain_b_val:
            raise ShapeError("domain-B train and validation splits must be non-empty")
        overlap = set(self.synthetic_seeds) & set(self.domain_b_seeds)
        if overlap:
            raise ConfigError(f"domain-B shares burst seeds with the synthetic set: {sorted(overlap)[:5]}")
        return (t1p, t1c), (t2p, t2c), (sp, sc)


@dataclass
class DistillResult:
    student: dict
    one_step_student: dict
    teacher2: dict
    report: dict


def _phase(name, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except StageError:
        raise
    except HexburstError as exc:
        raise StageError(name, exc) from exc


def two_step_distill(plan, out_dir=None, cache_dir=None):
    """Phase A refines teacher2 from teacher1 on domain B; phase B distils the
    student from the refined teacher2. The one-step path (student straight
    from teacher1, same init and steps as phase B) is run for the report.
    """
    (t1p, t1c), (t2p, t2c), (sp, sc) = plan.validate()
    out_dir = None if out_dir is None else Path(out_dir)
    sub = (lambda name: None if out_dir is None else out_dir / name)

    ta = replace(plan.tcfg, steps=plan.steps_a)
    tb = replace(plan.tcfg, steps=plan.steps_b)
    res_a, _ = _phase("phase A (teacher2 <- teacher1)", distill_step, (t1p, t1c), t2p, t2c,
                      plan.domain_b, ta, cache_dir, sub("teacher2"))
    teacher2 = res_a.params
    res_b, _ = _phase("phase B (student <- teacher2)", distill_step, (teacher2, t2c), sp, sc,
                      plan.domain_b, tb, cache_dir, sub("student"))
    res_1, _ = _phase("one-step (student <- teacher1)", distill_step, (t1p, t1c), sp, sc,
                      plan.domain_b, tb, cache_dir, sub("one_step_student"))

    val_targets = _phase("validation", pseudo_gt, teacher2, t2c, plan.domain_b_val, cache_dir)
    clean = [p.target for p in plan.domain_b_val]
    report = {
        "one_step_val_loss": val_loss(res_1.params, sc, plan.domain_b_val, val_targets),
        "two_step_val_loss": val_loss(res_b.params, sc, plan.domain_b_val, val_targets),
        "psnr_before": mean_psnr(sp, sc, plan.domain_b_val, clean),
        "psnr_after": mean_psnr(res_b.params, sc, plan.domain_b_val, clean),
        "steps_a": plan.steps_a,
        "steps_b": plan.steps_b,
        "w_lab": plan.tcfg.w_lab,
    }
    log.info("distill report %s", json.dumps(report))
    if out_dir is not None:
        save_json(out_dir / "distill_report.json", report)
    return DistillResult(res_b.params, res_1.params, teacher2, report)


def prepare_domain(bursts, tcfg, flow_params=None):
    """Prepared bursts (targets = clean gt) using the flow source of ``tcfg``."""
    return prepare(bursts, tcfg.flow_source, flow_params, tcfg.max_disp)


__all__ = [
    "DistillPlan", "DistillResult", "check_compatible", "distill_step", "mean_psnr",
    "prepare_domain", "pseudo_gt", "two_step_distill", "val_loss", "with_targets"
]
