"""Command-line entry point: generate | train | eval | ablate | sweep-slots |
sweep-lambda | render-overlays.

Configuration comes from an optional JSON file plus flag overrides; every
artifact-producing command writes a run.json (config, seed, git describe,
wall clock) next to its outputs, and re-running from that run.json
reproduces the outputs bit-exactly. EORAS_THREADS caps the worker pool.
Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric error.
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time

# Cap BLAS pools before numpy spins them up; the process pool provides the
# parallelism and oversubscription thrashes small-matrix workloads.
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np

from .errors import ConfigError, DataError, EorasError, NumericError


def _git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=10,
                             cwd=os.path.dirname(os.path.abspath(__file__)))
        if out.returncode == 0:
            return out.stdout.strip()
    except Exception:
        pass
    return "unknown"


def _workers(requested: int | None) -> int:
    cap = os.environ.get("EORAS_THREADS")
    cap = int(cap) if cap else (os.cpu_count() or 1)
    if requested is None:
        return max(1, min(4, cap))
    return max(1, min(requested, cap))


def write_run_json(out_dir: str, command: str, config: dict, seed: int,
                   started: float) -> None:
    os.makedirs(out_dir, exist_ok=True)
    payload = {
        "command": command,
        "config": config,
        "seed": seed,
        "git": _git_describe(),
        "wall_clock_sec": round(time.time() - started, 3),
    }
    with open(os.path.join(out_dir, "run.json"), "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)


def load_config_file(path: str) -> dict:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})")
    if "config" in raw and "command" in raw:   # a run.json
        return raw["config"]
    return raw


# ---------------------------------------------------------------------------
# commands

def cmd_generate(args) -> int:
    from .synth import generate_dataset, write_dataset
    from .metrics import is_partially_occluded
    started = time.time()
    seqs = generate_dataset(args.seed, args.difficulty, args.count,
                            num_frames=args.frames, image_size=args.image_size)
    write_dataset(seqs, args.out)
    total, occluded, occ_ratio = 0, 0, []
    for seq in seqs:
        for t in range(seq.num_frames):
            for k in range(seq.num_objects):
                total += 1
                full, vis = seq.full_masks[t, k], seq.visible_masks[t, k]
                if is_partially_occluded(full, vis):
                    occluded += 1
                    occ_ratio.append(1.0 - vis.sum() / full.sum())
    config = {"seed": args.seed, "difficulty": args.difficulty, "count": args.count,
              "frames": args.frames, "image_size": args.image_size, "out": args.out}
    write_run_json(args.out, "generate", config, args.seed, started)
    print(f"wrote {len(seqs)} sequences to {args.out}")
    print(f"instances: {total}, partially occluded: {occluded} "
          f"({100.0 * occluded / max(total, 1):.1f}%), "
          f"mean occluded fraction: {float(np.mean(occ_ratio)) if occ_ratio else 0.0:.3f}")
    return 0


def _train_config_from_args(args) -> "TrainConfig":
    from .model import ModelConfig
    from .train import TrainConfig
    base = {}
    if args.config:
        base = load_config_file(args.config)
    cfg = TrainConfig.from_dict(base) if base else TrainConfig()
    model_over = {}
    for flag, key in (("no_bev", "use_bev"), ("no_temporal", "use_temporal"),
                      ("no_bidirectional", "use_bidirectional")):
        if getattr(args, flag):
            model_over[key] = False
    if args.input_mode:
        model_over["input_mode"] = args.input_mode
    if args.strict_ff:
        model_over["strict_ff"] = True
    if args.slots is not None:
        model_over["n_slots"] = args.slots
    if model_over:
        from dataclasses import asdict
        raw = asdict(cfg.model)
        raw.update(model_over)
        cfg.model = ModelConfig.from_json(json.dumps(raw))
    for name in ("seed", "data", "val_data", "epochs", "batch_size", "lr0",
                 "lam", "gamma", "checkpoint_every"):
        val = getattr(args, name)
        if val is not None:
            setattr(cfg, name, val)
    if args.strict_sum_loss:
        cfg.strict_sum_loss = True
    cfg.workers = _workers(args.workers)
    return cfg


def cmd_train(args) -> int:
    from .train import Trainer
    started = time.time()
    cfg = _train_config_from_args(args)
    trainer = Trainer(cfg, args.out, resume=args.resume)
    final = trainer.train()
    write_run_json(args.out, "train", cfg.to_dict(), cfg.seed, started)
    print(f"final checkpoint: {final}")
    return 0


def cmd_eval(args) -> int:
    from .evaluation import evaluate_dataset
    from .synth import load_dataset
    from .train import load_model
    started = time.time()
    net = load_model(args.checkpoint)
    seqs = load_dataset(args.data)
    report = evaluate_dataset(net, seqs, variant=args.variant,
                              pp_intersection=args.pp_intersection,
                              config_echo={"checkpoint": args.checkpoint,
                                           "data": args.data})
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "eval.csv"), "w") as fh:
        fh.write(report.to_csv())
    with open(os.path.join(args.out, "summary.json"), "w") as fh:
        fh.write(report.to_json())
    config = {"checkpoint": args.checkpoint, "data": args.data,
              "variant": args.variant, "pp_intersection": args.pp_intersection}
    write_run_json(args.out, "eval", config, 0, started)
    summary = report.summary()["methods"]
    for method, vals in summary.items():
        occ = vals["miou_occ"]
        occ_txt = "-" if method == "vm" else (occ if isinstance(occ, str) else f"{100 * occ:.2f}")
        print(f"{method:14s} mIoU_full {100 * vals['miou_full']:.2f}  mIoU_occ {occ_txt}")
    return 0


ABLATION_ROWS = [
    # (label, use_temporal, use_bidirectional, use_bev)
    ("1", False, False, False),
    ("2", True, True, False),
    ("3", True, False, True),
    ("4", True, True, True),
]


def _run_row(base_cfg, out_dir: str, row_dir: str, model_over: dict, test_data: str):
    """Train one configuration and evaluate it; returns (miou_full, miou_occ)."""
    import copy
    import json as _json
    from dataclasses import asdict
    from .evaluation import evaluate_dataset
    from .model import ModelConfig
    from .synth import load_dataset
    from .train import Trainer
    cfg = copy.deepcopy(base_cfg)
    raw = asdict(cfg.model)
    raw.update(model_over)
    cfg.model = ModelConfig.from_json(_json.dumps(raw))
    trainer = Trainer(cfg, row_dir, resume=False)
    final = trainer.train()
    report = evaluate_dataset(trainer.net, load_dataset(test_data),
                              include_baselines=False)
    stats = report.summary()["methods"]["model"]
    occ = stats["miou_occ"]
    return stats["miou_full"], (occ if isinstance(occ, float) else float("nan"))


def cmd_ablate(args) -> int:
    started = time.time()
    cfg = _train_config_from_args(args)
    os.makedirs(args.out, exist_ok=True)
    rows = []
    for label, temporal, bidir, bev in ABLATION_ROWS:
        over = {"use_temporal": temporal, "use_bidirectional": bidir, "use_bev": bev}
        row_dir = os.path.join(args.out, f"row{label}")
        mf, mo = _run_row(cfg, args.out, row_dir, over, args.test_data)
        rows.append((label, temporal, bidir, bev, mf, mo))
        print(f"row {label}: temporal={temporal} bidir={bidir} bev={bev} "
              f"-> mIoU_full {100 * mf:.2f} mIoU_occ {100 * mo:.2f}")
    with open(os.path.join(args.out, "ablation.csv"), "w") as fh:
        fh.write("no,temporal,bidirection,bev,miou_full,miou_occ\n")
        for label, tp, bd, bv, mf, mo in rows:
            fh.write(f"{label},{int(tp)},{int(bd)},{int(bv)},{mf:.6f},{mo:.6f}\n")
    with open(os.path.join(args.out, "ablation.md"), "w") as fh:
        fh.write("| No. | Temporal | Bi-direction | BEV | mIoU_full | mIoU_occ |\n")
        fh.write("|-----|----------|--------------|-----|-----------|----------|\n")
        for label, tp, bd, bv, mf, mo in rows:
            mark = lambda b: "x" if b else " "
            fh.write(f"| {label} | {mark(tp)} | {mark(bd)} | {mark(bv)} | "
                     f"{100 * mf:.2f} | {100 * mo:.2f} |\n")
    write_run_json(args.out, "ablate", cfg.to_dict() | {"test_data": args.test_data},
                   cfg.seed, started)
    return 0


def cmd_sweep(args, param: str, values: list) -> int:
    started = time.time()
    cfg = _train_config_from_args(args)
    os.makedirs(args.out, exist_ok=True)
    rows = []
    for val in values:
        row_dir = os.path.join(args.out, f"{param}_{val}")
        if param == "slots":
            mf, mo = _run_row(cfg, args.out, row_dir, {"n_slots": int(val)}, args.test_data)
        else:
            import copy
            cfg2 = copy.deepcopy(cfg)
            cfg2.lam = float(val)
            mf, mo = _run_row(cfg2, args.out, row_dir, {}, args.test_data)
        rows.append((val, mf, mo))
        print(f"{param}={val}: mIoU_full {100 * mf:.2f} mIoU_occ {100 * mo:.2f}")
    with open(os.path.join(args.out, f"sweep_{param}.csv"), "w") as fh:
        fh.write(f"{param},miou_full,miou_occ\n")
        for val, mf, mo in rows:
            fh.write(f"{val},{mf:.6f},{mo:.6f}\n")
    write_run_json(args.out, f"sweep-{param}", cfg.to_dict() | {param: values},
                   cfg.seed, started)
    return 0


def cmd_render_overlays(args) -> int:
    from .evaluation import overlay_image
    from .synth import load_dataset, write_ppm
    from .train import load_model
    started = time.time()
    net = load_model(args.checkpoint)
    seqs = load_dataset(args.data)[:args.limit]
    os.makedirs(args.out, exist_ok=True)
    count = 0
    for seq in seqs:
        preds = net.forward_video(seq)
        for p in preds:
            img = overlay_image(seq.frames[p.frame_index], p.full_mask(),
                                seq.full_masks[p.frame_index, p.object_id],
                                seq.visible_masks[p.frame_index, p.object_id])
            write_ppm(os.path.join(
                args.out, f"{seq.name}_t{p.frame_index:02d}_k{p.object_id}.ppm"), img)
            count += 1
    write_run_json(args.out, "render-overlays",
                   {"checkpoint": args.checkpoint, "data": args.data,
                    "limit": args.limit}, 0, started)
    print(f"wrote {count} overlays to {args.out}")
    return 0


# ---------------------------------------------------------------------------

def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file (or a previous run.json)")
    p.add_argument("--data", help="training dataset directory")
    p.add_argument("--val-data", dest="val_data", help="validation dataset directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr0", type=float)
    p.add_argument("--lam", type=float, help="visible-mask loss weight")
    p.add_argument("--gamma", type=float, help="focal loss exponent")
    p.add_argument("--workers", type=int)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--slots", type=int, help="override slot count")
    p.add_argument("--no-bev", action="store_true")
    p.add_argument("--no-temporal", action="store_true")
    p.add_argument("--no-bidirectional", action="store_true")
    p.add_argument("--input-mode", dest="input_mode",
                   choices=["box_channel", "sg_visible_mask"])
    p.add_argument("--strict-sum-loss", dest="strict_sum_loss", action="store_true",
                   help="literal sums over instances instead of means")
    p.add_argument("--strict-ff", dest="strict_ff", action="store_true",
                   help="drop the feed-forward residual in fusion blocks")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="eoras",
                                 description="video amodal segmentation at desk scale")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic occlusion-video dataset")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--difficulty", choices=["B", "D"], default="B")
    g.add_argument("--count", type=int, default=10)
    g.add_argument("--frames", type=int, default=8)
    g.add_argument("--image-size", dest="image_size", type=int, default=48)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_generate)

    t = sub.add_parser("train", help="train a model")
    _add_train_flags(t)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", action="store_true")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint with baselines")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--variant", choices=["none", "pp", "pp_star", "sg"], default="none")
    e.add_argument("--pp-intersection", dest="pp_intersection", action="store_true",
                   help="fidelity variant: intersect instead of union")
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", help="train/evaluate the four design rows")
    _add_train_flags(a)
    a.add_argument("--test-data", dest="test_data", required=True)
    a.add_argument("--out", required=True)
    a.set_defaults(fn=cmd_ablate)

    ss = sub.add_parser("sweep-slots", help="slot-count sweep")
    _add_train_flags(ss)
    ss.add_argument("--test-data", dest="test_data", required=True)
    ss.add_argument("--values", default="2,8,32")
    ss.add_argument("--out", required=True)
    ss.set_defaults(fn=lambda args: cmd_sweep(args, "slots",
                                              [int(v) for v in args.values.split(",")]))

    sl = sub.add_parser("sweep-lambda", help="visible-loss weight sweep")
    _add_train_flags(sl)
    sl.add_argument("--test-data", dest="test_data", required=True)
    sl.add_argument("--values", default="0,0.5,1")
    sl.add_argument("--out", required=True)
    sl.set_defaults(fn=lambda args: cmd_sweep(args, "lambda",
                                              [float(v) for v in args.values.split(",")]))

    r = sub.add_parser("render-overlays", help="qualitative prediction overlays")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--limit", type=int, default=4)
    r.add_argument("--out", required=True)
    r.set_defaults(fn=cmd_render_overlays)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
