"""``mams`` command line: gen-data, train, eval, ablate, verify-ema, gradcheck, count.

Exit codes: 0 success, 1 validation failure (bad flags, config or input),
2 numerical-check failure. Every invocation that writes files does so under a
run directory ``<out root>/<timestamp>_<command>_seed<seed>``; the out root is
``--out-dir``, else ``$MAMS_OUT_ROOT``, else ``./runs``.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import os
import sys
import time
import traceback
from typing import List, Optional

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint, write_manifest
from .config import RunConfig, desk_ablation_config, dump_config, load_config
from .data import Dataset, export_dataset, generate_synthetic, ingest_chestxray14, load_exported, split
from .errors import MamsError, NumericalError
from .gradcheck import TOLERANCE, run_all
from .model import GROUPS, build_model, count_params, estimate_flops
from .momentum import verify_unrolled_approximation
from .training import CELLS, evaluate, predict, run_ablation, structural_counts, train, init_rng

logger = logging.getLogger("mams")

OUT_ROOT_ENV = "MAMS_OUT_ROOT"
EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("run")
    g.add_argument("--config", help="key = value config file ([model], [train], [synth], [data])")
    g.add_argument("--preset", choices=["default", "desk"], default="default",
                   help="starting values before --config and flags; 'desk' is the 24px, 300+300-step ablation setup")
    g.add_argument("--seed", type=int, help="run seed (split, init, shuffling, dropout); default from config")
    g.add_argument("--out-dir", help=f"output root (default ${OUT_ROOT_ENV} or ./runs)")
    g.add_argument("--plots", action="store_true", help="also write SVG figures (needs matplotlib)")
    g.add_argument("-v", "--verbose", action="store_true")


def _model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--use-fusion", action=argparse.BooleanOptionalAction, default=None)
    g.add_argument("--use-momentum", action=argparse.BooleanOptionalAction, default=None)
    g.add_argument("--stop-grad-momentum", action=argparse.BooleanOptionalAction, default=None,
                   help="block gradients through the momentum branch into the backbone")


def _train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--m", type=float, help="EMA momentum coefficient in [0, 1)")
    g.add_argument("--optimizer", choices=["adam", "sgd"])
    g.add_argument("--eta", type=float, help="learning rate")
    g.add_argument("--stage1-steps", type=int)
    g.add_argument("--stage2-steps", type=int)


def _data_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("dataset (default: generate the synthetic set from [synth])")
    g.add_argument("--data-dir", help="directory written by gen-data")
    g.add_argument("--label-csv", help="ChestX-ray14 style label table")
    g.add_argument("--image-dir", help="directory holding the images named in --label-csv")
    g.add_argument("--num-images", type=int, help="synthetic dataset size M")
    g.add_argument("--image-size", type=int, help="synthetic image side, or resize target for --label-csv")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mams", description="Momentum-anchored multi-scale fusion: training and verifiers.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate and export the synthetic long-tailed dataset")
    _common(p)
    _data_flags(p)
    p.add_argument("--tail-ratio", type=float, help="prevalence ratio between consecutive classes")

    p = sub.add_parser("train", help="two-stage training of one model, then val/test evaluation")
    _common(p)
    _model_flags(p)
    _train_flags(p)
    _data_flags(p)

    p = sub.add_parser("eval", help="evaluate a saved checkpoint")
    _common(p)
    _data_flags(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p.add_argument("--split", default="test", choices=["train", "val", "test"])

    p = sub.add_parser("ablate", help="2x2 fusion/momentum ablation over several seeds")
    _common(p)
    _model_flags(p)
    _train_flags(p)
    _data_flags(p)
    p.add_argument("--seeds", default="0,1,2", help="comma separated run seeds")
    p.add_argument("--workers", type=int, default=1, help="worker processes")
    p.add_argument("--cells", default=",".join(CELLS), help="comma separated subset of " + ", ".join(CELLS))

    p = sub.add_parser("verify-ema", help="residuals of the unrolled EMA expansion under plain SGD")
    _common(p)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--m", type=float, default=0.9)
    p.add_argument("--eta", type=float, default=1e-3, help="largest learning rate; also runs eta/2 and eta/4")
    p.add_argument("--dim", type=int, default=8, help="dimension of the quadratic problem")

    p = sub.add_parser("gradcheck", help="finite-difference checks of every op and the full model")
    _common(p)
    _model_flags(p)

    p = sub.add_parser("count", help="per-group parameter and FLOP counts")
    _common(p)
    _model_flags(p)
    return parser


# -- helpers -------------------------------------------------------------------


def resolve_config(args) -> RunConfig:
    base = desk_ablation_config() if args.preset == "desk" else RunConfig()
    cfg = load_config(args.config, base)
    model_over = {
        "use_fusion": getattr(args, "use_fusion", None),
        "use_momentum": getattr(args, "use_momentum", None),
        "stop_gradient_momentum": getattr(args, "stop_grad_momentum", None),
    }
    train_over = {
        "seed": args.seed,
        "m": getattr(args, "m", None) if args.command in ("train", "ablate") else None,
        "optimizer": getattr(args, "optimizer", None),
        "eta": getattr(args, "eta", None) if args.command in ("train", "ablate") else None,
        "stage1_steps": getattr(args, "stage1_steps", None),
        "stage2_steps": getattr(args, "stage2_steps", None),
    }
    synth_over = {"num_images": getattr(args, "num_images", None), "image_size": getattr(args, "image_size", None),
                  "tail_ratio": getattr(args, "tail_ratio", None)}
    cfg.model = dataclasses.replace(cfg.model, **{k: v for k, v in model_over.items() if v is not None})
    cfg.train = dataclasses.replace(cfg.train, **{k: v for k, v in train_over.items() if v is not None})
    cfg.synth = dataclasses.replace(cfg.synth, **{k: v for k, v in synth_over.items() if v is not None})
    for key in ("data_dir", "label_csv", "image_dir"):
        if getattr(args, key, None):
            setattr(cfg.data, key, getattr(args, key))
    if getattr(args, "image_size", None):
        cfg.data.image_size = args.image_size
    cfg.model.validate()
    cfg.train.validate()
    cfg.synth.validate()
    return cfg


def run_dir(args, seed: int) -> str:
    root = args.out_dir or os.environ.get(OUT_ROOT_ENV) or "runs"
    stamp = time.strftime("%Y%m%d-%H%M%S")
    path = os.path.join(root, f"{stamp}_{args.command}_seed{seed}")
    n = 1
    while os.path.exists(path):
        path = os.path.join(root, f"{stamp}_{args.command}_seed{seed}.{n}")
        n += 1
    os.makedirs(path)
    return path


def _record(path: str, args, cfg: RunConfig, argv: List[str], extra: Optional[dict] = None) -> None:
    with open(os.path.join(path, "config.cfg"), "w") as fh:
        fh.write(dump_config(cfg))
    fields = {"command": args.command, "argv": argv, "version": __version__, "seed": cfg.train.seed,
              "config_file": "config.cfg"}
    if extra:
        fields.update(extra)
    write_manifest(os.path.join(path, "manifest.txt"), fields)


def load_dataset(cfg: RunConfig) -> Dataset:
    if cfg.data.data_dir:
        return load_exported(cfg.data.data_dir)
    if cfg.data.label_csv or cfg.data.image_dir:
        if not (cfg.data.label_csv and cfg.data.image_dir):
            raise MamsError("--label-csv and --image-dir must be given together", module="data")
        return ingest_chestxray14(cfg.data.label_csv, cfg.data.image_dir, image_size=cfg.data.image_size)
    return generate_synthetic(cfg.synth)


def _match_input_size(cfg: RunConfig, ds: Dataset) -> None:
    side = ds.load(np.arange(1)).shape[-2:]
    if tuple(side) != tuple(cfg.model.input_size):
        logger.info("model input_size set to %s to match the data", tuple(side))
        cfg.model = dataclasses.replace(cfg.model, input_size=tuple(int(s) for s in side))


def _split(cfg: RunConfig, ds: Dataset) -> Dataset:
    if ds.split_tags is not None:
        return ds
    return split(ds, cfg.train.split_fractions, seed=cfg.train.seed, by_group=cfg.train.split_by_group)


# -- commands ------------------------------------------------------------------


def cmd_gen_data(args, cfg, argv) -> int:
    out = run_dir(args, cfg.synth.seed)
    ds = generate_synthetic(cfg.synth)
    export_dataset(ds, out)
    _record(out, args, cfg, argv, {"num_images": len(ds), "prevalence": ds.prevalence().round(6).tolist()})
    print(out)
    return EXIT_OK


def cmd_train(args, cfg, argv) -> int:
    ds = load_dataset(cfg)
    _match_input_size(cfg, ds)
    ds = _split(cfg, ds)
    out = run_dir(args, cfg.train.seed)
    _record(out, args, cfg, argv)
    model = build_model(cfg.model, init_rng(cfg.train.seed))
    model, report = train(model, ds, cfg.train, out_dir=out)
    save_checkpoint(model, os.path.join(out, "checkpoint_final"), step=report.optimizer_steps,
                    m=cfg.train.m if model.momentum is not None else None, seed=cfg.train.seed)
    report.write_loss_csv(os.path.join(out, "loss.csv"))
    for name in ("val", "test"):
        ev = evaluate(model, ds, name, cfg.train.eval_batch_size, cfg.train.seed)
        ev.to_csv(os.path.join(out, f"eval_{name}.csv"))
        print(f"{name} mean AUC {ev.mean_auc:.4f}")
    if args.plots:
        from .plots import loss_curve_svg, roc_svg

        loss_curve_svg(report, os.path.join(out, "loss.svg"))
        idx = ds.indices("test")
        roc_svg(predict(model, ds, idx), ds.labels[idx], ds.class_names, os.path.join(out, "roc_test.svg"))
    print(out)
    return EXIT_OK


def cmd_eval(args, cfg, argv) -> int:
    model, manifest = load_checkpoint(args.checkpoint)
    if args.seed is None and manifest.get("seed") is not None:
        # same split as the training run
        cfg.train = dataclasses.replace(cfg.train, seed=int(manifest["seed"]))
    ds = _split(cfg, load_dataset(cfg))
    out = run_dir(args, cfg.train.seed)
    _record(out, args, cfg, argv, {"checkpoint": os.path.abspath(args.checkpoint)})
    ev = evaluate(model, ds, args.split, cfg.train.eval_batch_size, cfg.train.seed)
    ev.to_csv(os.path.join(out, f"eval_{args.split}.csv"))
    if args.plots:
        from .plots import roc_svg

        idx = ds.indices(args.split)
        roc_svg(predict(model, ds, idx), ds.labels[idx], ds.class_names, os.path.join(out, f"roc_{args.split}.svg"))
    print(f"{args.split} mean AUC {ev.mean_auc:.4f}")
    print(out)
    return EXIT_OK


def _int_list(text: str) -> List[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise MamsError(f"expected comma separated integers, got {text!r}", module="cli") from None


def cmd_ablate(args, cfg, argv) -> int:
    seeds = _int_list(args.seeds)
    cells = [c.strip() for c in args.cells.split(",") if c.strip()]
    bad = [c for c in cells if c not in CELLS]
    if bad or not seeds:
        raise MamsError(f"unknown cells {bad} or empty seed list", module="cli")
    ds = load_dataset(cfg)
    _match_input_size(cfg, ds)
    out = run_dir(args, seeds[0])
    _record(out, args, cfg, argv, {"seeds": seeds, "cells": cells})
    start = time.perf_counter()
    result = run_ablation(ds, cfg.model, cfg.train, seeds, out, args.workers, cells)
    print(result.format_table())
    print(f"wall clock {time.perf_counter() - start:.1f} s")
    print(out)
    failed = [r for reps in result.reports.values() for r in reps if r.status != "ok"]
    if any("NumericalError" in r.message for r in failed):
        return EXIT_NUMERICAL
    return EXIT_INVALID if failed else EXIT_OK


def cmd_verify_ema(args, cfg, argv) -> int:
    from .momentum import QuadraticProblem

    etas = (args.eta, args.eta / 2, args.eta / 4)
    problem = QuadraticProblem.random(args.dim, cfg.train.seed)
    res = verify_unrolled_approximation(etas, args.m, args.steps, problem)
    zero = verify_unrolled_approximation((0.0,), args.m, args.steps, problem)["worst"][0]
    out = run_dir(args, cfg.train.seed)
    _record(out, args, cfg, argv, {"etas": list(etas), "m": args.m, "steps": args.steps})
    path = os.path.join(out, "ema_residuals.csv")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["step", "eta", "max_residual", "mean_residual"])
        w.writeheader()
        for rep in res["reports"]:
            for row in rep.rows():
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    for eta, worst in zip(etas, res["worst"]):
        print(f"eta {eta:<10g} worst residual {worst:.3e}")
    print(f"eta 0          worst residual {zero:.3e}")
    ok = res["monotone"] and zero == 0.0
    print("monotone in eta: " + ("yes" if res["monotone"] else "NO"))
    print(path)
    return EXIT_OK if ok else EXIT_NUMERICAL


def cmd_gradcheck(args, cfg, argv) -> int:
    out = run_dir(args, cfg.train.seed)
    _record(out, args, cfg, argv)
    results = run_all(cfg.train.seed, cfg.model)
    path = os.path.join(out, "gradcheck.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["check", "max_relative_error", "pass"])
        for name, err in results.items():
            w.writerow([name, repr(err), err < TOLERANCE])
    width = max(len(k) for k in results)
    for name, err in results.items():
        print(f"{name:<{width}}  {err:.3e}  {'ok' if err < TOLERANCE else 'FAIL'}")
    print(path)
    return EXIT_OK if all(e < TOLERANCE for e in results.values()) else EXIT_NUMERICAL


def cmd_count(args, cfg, argv) -> int:
    model = build_model(cfg.model, np.random.default_rng(0))
    params, flops = count_params(model), estimate_flops(model)
    print(f"{'group':<10} {'params':>12} {'FLOPs':>14}")
    for g in GROUPS + ("total",):
        if g in params:
            print(f"{g:<10} {params[g]:>12} {flops.get(g, 0):>14}")
    print()
    counts = structural_counts(cfg.model)
    for cell, c in counts.items():
        print(f"{cell:<14} params {c['params']:>10}  FLOPs {c['flops']:>12}")
    d1 = counts["full"]["params"] - counts["fusion-only"]["params"]
    d2 = counts["momentum-only"]["params"] - counts["baseline"]["params"]
    print(f"momentum delta: {d1} (with fusion), {d2} (without)")
    out = run_dir(args, cfg.train.seed)
    _record(out, args, cfg, argv)
    with open(os.path.join(out, "counts.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "params", "flops"])
        for g in GROUPS + ("total",):
            if g in params:
                w.writerow([g, params[g], flops.get(g, 0)])
        for cell, c in counts.items():
            w.writerow([cell, c["params"], c["flops"]])
    print(out)
    ok = d1 == d2 and ("momentum" not in params or params["momentum"] == params["expansion"])
    return EXIT_OK if ok else EXIT_NUMERICAL


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "verify-ema": cmd_verify_ema,
    "gradcheck": cmd_gradcheck,
    "count": cmd_count,
}


def _origin(exc: BaseException) -> str:
    """Dotted module of the innermost frame that raised ``exc``."""
    frames = traceback.extract_tb(exc.__traceback__)
    if not frames:
        return "mams"
    path = frames[-1].filename
    for mod in list(sys.modules.values()):
        if getattr(mod, "__file__", None) == path:
            return mod.__name__
    return os.path.splitext(os.path.basename(path))[0]


def _report(exc: BaseException) -> None:
    print(f"error ({_origin(exc)}): {exc}", file=sys.stderr)


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg, argv)
    except NumericalError as exc:
        _report(exc)
        return EXIT_NUMERICAL
    except (MamsError, OSError, ValueError) as exc:
        _report(exc)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
