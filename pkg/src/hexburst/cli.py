"""``hexburst`` command-line entry point."""

import argparse
import json
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import ftr1
from .errors import ConfigError, HexburstError, ShapeError

log = logging.getLogger("hexburst")

EXIT_RUNTIME = 1
EXIT_USAGE = 2


# ---------------------------------------------------------------- helpers

def _hw(text):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}")
    if h <= 0 or w <= 0:
        raise argparse.ArgumentTypeError(f"size must be positive, got {text!r}")
    return h, w


def _dump(path, obj):
    ftr1.atomic_write_text(path, json.dumps(obj, indent=1, sort_keys=True))


def _load_flow_params(path):
    from .pyrflow import load_flownet
    return load_flownet(path)


def _flows_for(burst, method, flow_params, max_disp):
    from .train import burst_flows
    if method == "net" and flow_params is None:
        raise ConfigError("flow method 'net' needs a trained flow network "
                          "(pass --flow-ckpt or a checkpoint with a flow/ subdirectory, or use blockmatch)")
    return burst_flows(burst, method, flow_params, max_disp)


def _load_bursts(directory):
    from .rawsim import load_burst, load_dataset
    d = Path(directory)
    if (d / "manifest.json").exists():
        return load_dataset(d)
    if (d / "burst.json").exists() or list(d.glob("frame_*.ftr")):
        return [load_burst(d)]
    raise ConfigError(f"{d} is neither a dataset (manifest.json) nor a burst directory")


def _split(items, val_count):
    if val_count <= 0 or val_count >= len(items):
        raise ConfigError(f"validation split {val_count} must be in [1, {len(items) - 1}]")
    return items[:-val_count], items[-val_count:]


# ---------------------------------------------------------------- subcommands

def cmd_synth(args):
    from .rawsim import SynthConfig, dataset_synthesize, domain_b_config
    kw = dict(frames=args.frames, max_shift=args.max_shift, seed=args.seed)
    cfg = domain_b_config(**kw) if args.domain == "b" else SynthConfig(**kw)
    log.info("synth config %s", json.dumps(cfg.to_json(), sort_keys=True))
    manifest = dataset_synthesize(args.input, args.out, cfg, threads=args.threads)
    ok = sum("skipped" not in e for e in manifest)
    print(f"synthesized {ok} bursts ({len(manifest) - ok} skipped) into {args.out}")


def cmd_flow(args):
    from .pyrflow import FlowField
    burst = _load_bursts(args.burst)
    if len(burst) != 1:
        raise ConfigError("flow takes a single burst directory")
    burst = burst[0]
    params = _load_flow_params(args.flow_ckpt) if args.flow_ckpt else None
    flows = _flows_for(burst, args.method, params, args.max_disp)
    out = Path(args.out)
    names = []
    for i, f in enumerate(flows, start=1):
        name = f"flow_{i}.ftr"
        ftr1.save(out / name, f)
        names.append(name)
    _dump(out / "flows.json", {"method": args.method, "reference": 0, "flows": names,
                               "scale": 0.25, "units": "raw px / 4"})
    mean_flow = [FlowField(f, 0.25).data.reshape(2, -1).mean(axis=1).round(3).tolist() for f in flows]
    print(f"wrote {len(names)} flows to {out}; mean (dx, dy) per frame: {mean_flow}")


def cmd_flow_finetune(args):
    from .pyrflow import flow_pairs, init_flownet, photometric_finetune, save_flownet
    bursts = _load_bursts(args.data)
    params = _load_flow_params(args.init) if args.init else init_flownet(seed=args.seed)
    pairs = flow_pairs(bursts)
    params, losses = photometric_finetune(params, pairs, args.steps, lr=args.lr, batch=args.batch,
                                          seed=args.seed)
    out = Path(args.out)
    save_flownet(out, params, {"steps": args.steps, "lr": args.lr, "batch": args.batch, "seed": args.seed})
    ftr1.atomic_write_text(out / "loss_curve.csv",
                           "step,loss\n" + "".join(f"{k},{v!r}\n" for k, v in enumerate(losses)))
    if losses:
        print(f"photometric loss {losses[0]:.5f} -> {losses[-1]:.5f} over {len(losses)} steps")


def _train_config(args, **extra):
    from .train import TrainConfig
    return TrainConfig(steps=args.steps, batch=args.batch, crop=args.crop, lr=args.lr,
                       use_lab=args.lab, checkpoint_every=args.checkpoint_every, seed=args.seed,
                       flow_source=args.flow, **extra)


def _attach_flow(ckpt_dir, flow_ckpt):
    if flow_ckpt:
        dst = Path(ckpt_dir) / "flow"
        tmp = Path(str(dst) + ".tmp")
        shutil.rmtree(tmp, ignore_errors=True)
        shutil.copytree(flow_ckpt, tmp)
        shutil.rmtree(dst, ignore_errors=True)
        os.replace(tmp, dst)


def cmd_train(args):
    from .model import load_checkpoint, preset
    from .train import prepare, train
    tcfg = _train_config(args)
    if args.init:
        params, cfg, _ = load_checkpoint(args.init)
    else:
        params, cfg = None, preset(args.config)
    log.info("model config %s", json.dumps(cfg.to_json(), sort_keys=True))
    log.info("train config %s", json.dumps(tcfg.to_json(), sort_keys=True))
    flow_params = _load_flow_params(args.flow_ckpt) if args.flow_ckpt else None
    if tcfg.flow_source == "net" and flow_params is None:
        raise ConfigError("--flow net needs --flow-ckpt")
    data = prepare(_load_bursts(args.data), tcfg.flow_source, flow_params, tcfg.max_disp)
    res = train(cfg, tcfg, data, params=params, out_dir=args.out)
    _attach_flow(res.checkpoint, args.flow_ckpt)
    c = res.curve
    if c:
        print(f"trained {len(c)} steps: loss {c[0][3]:.5f} -> {c[-1][3]:.5f}; checkpoint {res.checkpoint}")
    else:
        print(f"0 steps; initial checkpoint {res.checkpoint}")


def cmd_distill(args):
    from .distill import DistillPlan, prepare_domain, two_step_distill
    from .model import load_checkpoint, save_checkpoint
    tcfg = _train_config(args)
    t1, t2, st = (load_checkpoint(p)[:2] for p in (args.teacher1, args.teacher2, args.student))
    bursts = _load_bursts(args.data)
    rows = prepare_domain(bursts, tcfg)
    train_b, val_b = _split(rows, args.val)
    syn_seeds = ()
    if args.synthetic_manifest:
        syn_seeds = tuple(e["seed"] for e in json.loads(Path(args.synthetic_manifest).read_text())
                          if "seed" in e)
    plan = DistillPlan(t1, t2, st, train_b, val_b, args.steps_a, args.steps_b, tcfg,
                       synthetic_seeds=syn_seeds, domain_b_seeds=tuple(b.seed for b in bursts))
    out = Path(args.out)
    log.info("distill plan steps_a=%d steps_b=%d train=%d val=%d %s", args.steps_a, args.steps_b,
             len(train_b), len(val_b), json.dumps(tcfg.to_json(), sort_keys=True))
    res = two_step_distill(plan, out_dir=out, cache_dir=out / "cache")
    save_checkpoint(out / "final_student", res.student, st[1], step=args.steps_b,
                    extra={"distill_report": res.report})
    print(json.dumps(res.report, sort_keys=True))


def cmd_infer(args):
    from .imageio import write_png16
    from .model import load_checkpoint
    from .train import predict
    params, cfg, _ = load_checkpoint(args.ckpt)
    bursts = _load_bursts(args.burst)
    if len(bursts) != 1:
        raise ConfigError("infer takes a single burst directory")
    burst = bursts[0]
    H, W = burst.frames[0].values.shape
    if H % cfg.input_multiple or W % cfg.input_multiple:
        raise ShapeError(f"raw dims {H}x{W} must be divisible by {cfg.input_multiple}")
    flow_params = None
    if args.flow == "net":
        src = args.flow_ckpt or (Path(args.ckpt) / "flow")
        if not (Path(src) / "flownet.json").exists():
            raise ConfigError(f"no flow network at {src}; pass --flow-ckpt or use --flow blockmatch")
        flow_params = _load_flow_params(src)
    flows = _flows_for(burst, args.flow, flow_params, args.max_disp)
    out = predict(params, cfg, burst.stack(), flows)
    write_png16(args.out, out)
    if args.raw_out:
        ftr1.save(args.raw_out, out)
    print(f"wrote {out.shape[2]}x{out.shape[1]} image to {args.out}")


def cmd_eval(args):
    from .evalkit import evaluate_dirs
    report, names = evaluate_dirs(args.pred, args.gt)
    out = Path(args.out) if args.out else Path(args.pred)
    report.write(out)
    m = report.methods[0]
    per = {n: ("inf" if np.isinf(p) else round(float(p), 4)) for n, p in zip(names, m.psnr)}
    log.info("per-image PSNR %s", per)
    psnr_txt = "inf" if np.isinf(m.mean_psnr) else f"{m.mean_psnr:.4f}"
    print(f"PSNR {psnr_txt} dB  SSIM {m.mean_ssim:.6f}  ({len(names)} images; report in {out})")


def cmd_bench(args):
    from .evalkit import bench_model
    from .model import init_params, load_checkpoint, param_count, preset
    if args.ckpt:
        params, cfg, _ = load_checkpoint(args.ckpt)
    else:
        cfg = preset(args.config)
        params = init_params(cfg, seed=args.seed)
    res = bench_model(params, cfg, args.size, repeats=args.repeats, threads=args.threads, seed=args.seed)
    rec = res.to_json()
    rec.update({"size": list(args.size), "params": param_count(params), "threads": args.threads,
                "config": cfg.to_json()})
    if args.out:
        _dump(args.out, rec)
    print(f"median {res.median:.4f} s over {args.repeats} runs ({param_count(params):,} params, "
          f"{args.size[0]}x{args.size[1]} raw, {args.threads} threads)")


# ---------------------------------------------------------------- parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: category=usage {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _add_train_flags(p, steps):
    p.add_argument("--steps", type=int, default=steps)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--crop", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--lab", action="store_true", help="add the CIELAB term (w_lab 0.1)")
    p.add_argument("--checkpoint-every", type=int, default=500)
    p.add_argument("--flow", choices=("true", "blockmatch", "net"), default="true",
                   help="flow source for the bursts (true = recorded shifts)")


def _globals(p, suppress):
    hide = {"default": argparse.SUPPRESS} if suppress else {}
    p.add_argument("--seed", type=int, **(hide or {"default": 0}))
    p.add_argument("--threads", type=int, **(hide or {"default": os.cpu_count() or 1}),
                   help="bounds BLAS and worker parallelism")
    p.add_argument("--verbose", "-v", action="store_true", **hide)
    return p


def build_parser():
    top = _globals(argparse.ArgumentParser(add_help=False), suppress=False)
    # repeated on each subcommand without defaults, so the top-level values survive
    common = _globals(argparse.ArgumentParser(add_help=False), suppress=True)

    ap = _Parser(prog="hexburst", description="Hexadeca-Bayer burst super-resolution toolkit.",
                 parents=[top])
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="render raw bursts from RGB images")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, default=4)
    p.add_argument("--max-shift", type=float, default=16.0, help="raw pixels")
    p.add_argument("--domain", choices=("a", "b"), default="a",
                   help="b = the disjoint blur/noise ranges used for distillation")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("flow", parents=[common], help="estimate flows for one burst")
    p.add_argument("--burst", required=True)
    p.add_argument("--method", choices=("net", "blockmatch"), default="net")
    p.add_argument("--flow-ckpt")
    p.add_argument("--max-disp", type=int, default=8)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_flow)

    p = sub.add_parser("flow-finetune", parents=[common], help="unsupervised flow-net fine-tuning")
    p.add_argument("--data", required=True)
    p.add_argument("--init")
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--lr", type=float, default=5e-3)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_flow_finetune)

    p = sub.add_parser("train", parents=[common], help="train the burst model on synthetic data")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default="tiny", help="S, L, tiny, tiny-L or micro")
    p.add_argument("--init", help="start from this checkpoint")
    p.add_argument("--flow-ckpt")
    p.add_argument("--out", required=True)
    _add_train_flags(p, 2000)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("distill", parents=[common], help="two-step distillation on domain-B bursts")
    p.add_argument("--teacher1", required=True)
    p.add_argument("--teacher2", required=True)
    p.add_argument("--student", required=True)
    p.add_argument("--data", required=True, help="domain-B dataset")
    p.add_argument("--val", type=int, default=2, help="bursts held out for validation")
    p.add_argument("--steps-a", type=int, default=300)
    p.add_argument("--steps-b", type=int, default=300)
    p.add_argument("--synthetic-manifest", help="manifest of the synthetic set, checked for seed overlap")
    p.add_argument("--out", required=True)
    _add_train_flags(p, 0)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("infer", parents=[common], help="reconstruct one burst")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--burst", required=True)
    p.add_argument("--out", required=True, help="16-bit PNG")
    p.add_argument("--flow", choices=("net", "blockmatch", "true"), default="net")
    p.add_argument("--flow-ckpt")
    p.add_argument("--max-disp", type=int, default=8)
    p.add_argument("--raw-out", help="also write linear values as FTR1")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", parents=[common], help="PSNR/SSIM of predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", help="report directory (default: --pred)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", parents=[common], help="time model inference")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--ckpt")
    g.add_argument("--config", default="S")
    p.add_argument("--size", type=_hw, default=(256, 256), help="raw HxW")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--out", help="write the timing record as JSON")
    p.set_defaults(func=cmd_bench)
    return ap


def run(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    if args.threads < 1:
        ap.error("--threads must be at least 1")
    resolved = {k: v for k, v in vars(args).items() if k != "func"}
    log.info("resolved config %s", json.dumps(resolved, sort_keys=True, default=str))
    try:
        with threadpool_limits(limits=args.threads):
            args.func(args)
    except HexburstError as exc:
        print(f"error: category={exc.category} {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"error: category=io {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
