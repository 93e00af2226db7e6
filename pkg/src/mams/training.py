"""Two-stage training, evaluation and the 2x2 fusion/momentum ablation.

Stage 1 trains with BCE on batches of 64 drawn only from images that have at
least one positive label; stage 2 trains with Asymmetric Loss on batches of
128 from the full training split. After every optimizer step the EMA branch
is updated once (when the model has one).
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import functional as F
from .checkpoint import save_checkpoint, write_manifest
from .data import Dataset, repeat_batches, split
from .errors import ConfigError, NumericalError, UsageError
from .losses import LossConfig, compute_loss
from .metrics import EvalReport, aggregate_runs, evaluate_scores
from .model import ModelConfig, ModelGraph, build_model, count_params, estimate_flops, forward_full
from .momentum import EmaState, ema_state_for, ema_update
from .optim import make_optimizer
from .tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

CELLS = {
    "baseline": (False, False),
    "fusion-only": (True, False),
    "momentum-only": (False, True),
    "full": (True, True),
}

# Values not given by the method description; flagged in every run manifest.
ASSUMED_DEFAULTS = (
    "optimizer", "eta", "stage1_steps", "stage2_steps",
    "asl_gamma_pos", "asl_gamma_neg", "asl_prob_shift",
)


@dataclass
class TrainConfig:
    stage1_steps: int = 2000
    stage1_batch_size: int = 64
    stage2_steps: int = 2000
    stage2_batch_size: int = 128
    optimizer: str = "adam"
    eta: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    m: float = 0.999
    seed: int = 0
    asl_gamma_pos: float = 0.0
    asl_gamma_neg: float = 4.0
    asl_prob_shift: float = 0.05
    split_fractions: Tuple[float, float, float] = (0.7, 0.1, 0.2)
    split_by_group: bool = False
    eval_batch_size: int = 256
    record_ema_history: bool = False

    def __post_init__(self):
        self.split_fractions = tuple(float(v) for v in self.split_fractions)

    def validate(self) -> None:
        if min(self.stage1_steps, self.stage2_steps) < 0:
            raise ConfigError("step counts must be nonnegative")
        if min(self.stage1_batch_size, self.stage2_batch_size) < 2:
            raise ConfigError("batch sizes must be at least 2 (batch statistics)")
        if not 0.0 <= self.m < 1.0:
            raise ConfigError(f"momentum coefficient m must lie in [0, 1), got {self.m}")
        if self.eta < 0:
            raise ConfigError("learning rate must be nonnegative")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        self.stage_loss(2).validate()

    def stage_loss(self, stage: int) -> LossConfig:
        if stage == 1:
            return LossConfig("bce")
        return LossConfig("asl", self.asl_gamma_pos, self.asl_gamma_neg, self.asl_prob_shift)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class StepRecord:
    step: int
    stage: int
    batch_size: int
    all_negative: int
    loss: float


@dataclass
class RunReport:
    cell: str = "full"
    seed: int = 0
    evals: Dict[str, EvalReport] = field(default_factory=dict)
    params: Dict[str, int] = field(default_factory=dict)
    flops: Dict[str, int] = field(default_factory=dict)
    wall_clock: float = 0.0
    steps: List[StepRecord] = field(default_factory=list)
    optimizer_steps: int = 0
    ema_updates: int = 0
    status: str = "ok"
    message: str = ""

    def loss_curve(self) -> List[Tuple[int, int, float]]:
        return [(r.step, r.stage, r.loss) for r in self.steps]

    def write_loss_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "stage", "loss_value"])
            for r in self.steps:
                w.writerow([r.step, r.stage, repr(r.loss)])


def _seeds(seed: int) -> Dict[str, int]:
    keys = ("init", "shuffle1", "shuffle2", "dropout")
    states = np.random.SeedSequence(seed).generate_state(len(keys))
    return {k: int(s) for k, s in zip(keys, states)}


def init_rng(seed: int) -> np.random.Generator:
    """Generator (PCG64) used to initialize a model for run ``seed``."""
    return np.random.default_rng(_seeds(seed)["init"])


def _grad_norms(model: ModelGraph) -> Dict[str, float]:
    out = {}
    for name, g in model.groups().items():
        sq = sum(float(np.sum(p.grad * p.grad)) for p in g.params if p.grad is not None)
        out[name] = float(np.sqrt(sq))
    return out


def train(
    model: ModelGraph,
    dataset: Dataset,
    config: TrainConfig,
    out_dir: Optional[str] = None,
    ema_state: Optional[EmaState] = None,
    cell: str = "full",
) -> Tuple[ModelGraph, RunReport]:
    """Run stage 1 then stage 2 on the train split of an already split dataset.

    ``ema_state`` may be supplied (e.g. with ``record=True``); otherwise one is
    created when the model has a momentum branch. It is exposed afterwards as
    ``model.ema_state``.
    """
    config.validate()
    if dataset.split_tags is None:
        raise UsageError("train() needs a split dataset")
    seeds = _seeds(config.seed)
    dropout_rng = np.random.default_rng(seeds["dropout"])
    if model.momentum is not None and ema_state is None:
        ema_state = ema_state_for(model, config.m, record=config.record_ema_history)
    model.ema_state = ema_state
    opt = make_optimizer(config.optimizer, model.trainable_params(), config.eta,
                         (config.adam_beta1, config.adam_beta2), config.adam_eps)
    report = RunReport(cell=cell, seed=config.seed, params=count_params(model), flops=estimate_flops(model))
    start = time.perf_counter()
    stages = [
        (1, config.stage1_steps, config.stage1_batch_size, True, seeds["shuffle1"]),
        (2, config.stage2_steps, config.stage2_batch_size, False, seeds["shuffle2"]),
    ]
    step = 0
    for stage, n_steps, bsize, positive_only, shuffle_seed in stages:
        loss_cfg = config.stage_loss(stage)
        if n_steps:
            batches = repeat_batches(dataset, "train", bsize, shuffle_seed, positive_only)
        for _ in range(n_steps):
            b = next(batches)
            logits = forward_full(model, Tensor(b.images), F.TRAIN, dropout_rng)
            loss = compute_loss(loss_cfg, logits, b.labels)
            model.zero_grad()
            loss.backward()
            value = loss.item()
            if not np.isfinite(value):
                raise NumericalError(
                    f"non-finite loss {value} at step {step} (stage {stage}, lr {config.eta}); "
                    f"grad norms {_grad_norms(model)}"
                )
            opt.step()
            report.optimizer_steps += 1
            if ema_state is not None:
                ema_update(ema_state, model.expansion.params())
                report.ema_updates += 1
            report.steps.append(StepRecord(step, stage, len(b), int((b.labels.sum(axis=1) == 0).sum()), value))
            step += 1
        if out_dir is not None:
            save_checkpoint(model, os.path.join(out_dir, f"checkpoint_stage{stage}"), step=step,
                            m=config.m if ema_state is not None else None, seed=config.seed)
    report.wall_clock = time.perf_counter() - start
    return model, report


def predict(model: ModelGraph, dataset: Dataset, indices, batch_size: int = 256, sigmoid: bool = True) -> np.ndarray:
    """Eval-mode scores for the given items: sigmoid(logits) by default."""
    out = []
    with no_grad():
        for s in range(0, len(indices), batch_size):
            chunk = indices[s:s + batch_size]
            logits = forward_full(model, Tensor(dataset.load(chunk)), F.EVAL)
            out.append(F.sigmoid(logits).data if sigmoid else logits.data)
    return np.concatenate(out, axis=0)


def evaluate(model: ModelGraph, dataset: Dataset, split_name: str = "val", batch_size: int = 256,
             seed: Optional[int] = None) -> EvalReport:
    idx = dataset.indices(split_name)
    if idx.size == 0:
        raise UsageError(f"split {split_name!r} is empty")
    scores = predict(model, dataset, idx, batch_size)
    return evaluate_scores(scores, dataset.labels[idx], dataset.class_names, seed, split_name)


def write_run_manifest(path, model_config: ModelConfig, train_config: TrainConfig, extra: Optional[Dict] = None) -> None:
    fields = {f"model.{k}": v for k, v in model_config.to_dict().items()}
    fields.update({f"train.{k}": v for k, v in train_config.to_dict().items()})
    fields["assumed_defaults"] = list(ASSUMED_DEFAULTS)
    if extra:
        fields.update(extra)
    write_manifest(path, fields)


# -- ablation ------------------------------------------------------------------


def run_cell(dataset: Dataset, model_config: ModelConfig, train_config: TrainConfig, cell: str,
             seed: int, out_dir: Optional[str] = None) -> RunReport:
    """Split with ``seed``, initialize with ``seed``, train, evaluate val and test.

    Split seed and init seed vary together per run.
    """
    use_fusion, use_momentum = CELLS[cell]
    mcfg = dataclasses.replace(model_config, use_fusion=use_fusion, use_momentum=use_momentum)
    tcfg = dataclasses.replace(train_config, seed=seed)
    run_dir = os.path.join(out_dir, f"{cell}_seed{seed}") if out_dir else None
    try:
        ds = split(dataset, tcfg.split_fractions, seed=seed, by_group=tcfg.split_by_group)
        model = build_model(mcfg, init_rng(seed))
        model, report = train(model, ds, tcfg, out_dir=run_dir, cell=cell)
        for name in ("val", "test"):
            report.evals[name] = evaluate(model, ds, name, tcfg.eval_batch_size, seed)
    except Exception as exc:  # a failed cell is reported, not fatal to the table
        logger.exception("ablation cell %s seed %d failed", cell, seed)
        return RunReport(cell=cell, seed=seed, status="failed", message=f"{type(exc).__name__}: {exc}")
    if run_dir:
        os.makedirs(run_dir, exist_ok=True)
        write_run_manifest(os.path.join(run_dir, "manifest.txt"), mcfg, tcfg, {"cell": cell})
        report.write_loss_csv(os.path.join(run_dir, "loss.csv"))
        for name, ev in report.evals.items():
            ev.to_csv(os.path.join(run_dir, f"eval_{name}.csv"))
    return report


def _run_cell_args(args):
    return run_cell(*args)


@dataclass
class AblationResult:
    reports: Dict[str, List[RunReport]]
    seeds: List[int]
    split_name: str = "val"

    def cell_mean_aucs(self, cell: str) -> List[float]:
        return [r.evals[self.split_name].mean_auc if r.status == "ok" else float("nan") for r in self.reports[cell]]

    def rows(self) -> List[Dict]:
        base = self.cell_mean_aucs("baseline") if "baseline" in self.reports else None
        out = []
        for cell, reps in self.reports.items():
            ok = [r for r in reps if r.status == "ok"]
            row = {"cell": cell, "use_fusion": CELLS[cell][0], "use_momentum": CELLS[cell][1]}
            if ok and len(ok) == len(reps):
                agg = aggregate_runs([r.evals[self.split_name] for r in ok])
                row.update(mean_auc=agg.mean_auc, half_range=agg.mean_auc_half_spread, std=agg.mean_auc_std,
                           flops=ok[0].flops["total"], params=ok[0].params["total"], status="ok")
            else:
                row.update(mean_auc=float("nan"), half_range=float("nan"), std=float("nan"),
                           flops=ok[0].flops.get("total", 0) if ok else 0,
                           params=ok[0].params.get("total", 0) if ok else 0, status="FAILED")
            aucs = self.cell_mean_aucs(cell)
            for seed, auc in zip(self.seeds, aucs):
                row[f"seed{seed}_auc"] = auc
                if base is not None:
                    row[f"seed{seed}_delta"] = auc - base[self.seeds.index(seed)]
            out.append(row)
        return out

    def write_csv(self, path) -> None:
        rows = self.rows()
        keys = list(rows[0].keys())
        for r in rows[1:]:
            keys += [k for k in r if k not in keys]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys)
            w.writeheader()
            for r in rows:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})

    def parameter_deltas(self) -> Tuple[int, int]:
        """(params(full) - params(fusion-only), params(momentum-only) - params(baseline))."""
        p = {cell: reps[0].params["total"] for cell, reps in self.reports.items() if reps[0].params}
        return p["full"] - p["fusion-only"], p["momentum-only"] - p["baseline"]

    def format_table(self) -> str:
        lines = [f"{'cell':<14} {'fusion':>6} {'mom':>4} {'mean AUC':>18} {'FLOPs':>12} {'params':>10}"]
        for r in self.rows():
            auc = f"{r['mean_auc']:.4f} +/-{r['half_range']:.4f}" if r["status"] == "ok" else "FAILED"
            lines.append(f"{r['cell']:<14} {str(r['use_fusion']):>6} {str(r['use_momentum']):>4} "
                         f"{auc:>18} {r['flops']:>12} {r['params']:>10}")
        return "\n".join(lines)


def structural_counts(model_config: ModelConfig) -> Dict[str, Dict[str, int]]:
    """Parameter and FLOP totals of the four ablation cells, without training."""
    out = {}
    for cell, (fusion, momentum) in CELLS.items():
        m = build_model(dataclasses.replace(model_config, use_fusion=fusion, use_momentum=momentum),
                        np.random.default_rng(0))
        out[cell] = {"params": count_params(m)["total"], "flops": estimate_flops(m)["total"]}
    return out


def run_ablation(
    dataset: Dataset,
    model_config: ModelConfig,
    train_config: TrainConfig,
    seeds: Sequence[int] = (0, 1, 2),
    out_dir: Optional[str] = None,
    workers: int = 1,
    cells: Sequence[str] = tuple(CELLS),
) -> AblationResult:
    """Train every (cell, seed) pair and collect reports; writes ``ablation.csv`` into ``out_dir``."""
    counts = structural_counts(model_config)
    d_fusion = counts["full"]["params"] - counts["fusion-only"]["params"]
    d_plain = counts["momentum-only"]["params"] - counts["baseline"]["params"]
    if d_fusion != d_plain:
        raise UsageError(f"momentum parameter delta differs between fusion rows: {d_fusion} vs {d_plain}")

    jobs = [(dataset, model_config, train_config, cell, seed, out_dir) for cell in cells for seed in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_cell_args, jobs))
    else:
        results = [_run_cell_args(j) for j in jobs]
    reports: Dict[str, List[RunReport]] = {cell: [] for cell in cells}
    for job, rep in zip(jobs, results):
        reports[job[3]].append(rep)
    result = AblationResult(reports, list(seeds))
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        result.write_csv(os.path.join(out_dir, "ablation.csv"))
        AblationResult(reports, list(seeds), "test").write_csv(os.path.join(out_dir, "ablation_test.csv"))
    return result
