"""Command-line benchmark harness.

Verbs: `run` (train one configuration), `compare` (five strategies at one
reduction budget), `sweep-start` / `sweep-r` (upper-layer placement
sweeps), `plot` (accuracy vs token-steps charts), and `selftest` (quick
oracle checks). Experiment configs are flat key=value text files; every
CLI flag overrides the corresponding key. Exit codes: 0 success, 2 bad
config or infeasible plan, 3 numerical abort during training.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields, replace

import numpy as np

from . import data as datamod
from . import memory
from . import scheduler as sched
from . import train as trainmod
from .errors import ConfigError, FambaError, NumericalError
from .model import ModelConfig, init_model
from .tensor import Tensor

SUMMARY_COLUMNS = [
    "strategy", "r", "start_layer", "k_last", "budget", "total_reduced",
    "token_steps", "final_len", "dim", "e_dim", "n_state", "l_total", "patch",
    "image_h", "image_w", "n_classes", "epochs", "batch_size", "seed",
    "base_lr", "top1", "top5", "train_seconds", "peak_live_bytes",
]


@dataclass
class ExperimentConfig:
    # model
    image_h: int = 32
    image_w: int = 32
    channels: int = 3
    patch: int = 4
    dim: int = 64
    e_dim: int = 128
    n_state: int = 8
    l_total: int = 8
    n_classes: int = 0  # 0 = infer from dataset source
    k_conv: int = 4
    ssm_skip: bool = True
    head_hidden: int = 0
    fusion_weighted: bool = False
    # fusion placement
    strategy: str = "none"
    r: int = 0
    start: int = 0  # 0 = strategy default
    k_last: int = 0  # 0 = strategy default
    budget: int = 24
    # data
    data_dir: str = ""
    synthetic: str = "2000,4,7"  # n,classes,seed
    eval_fraction: float = 0.2
    augment: bool = True
    crop_pad: int = 4
    hflip_p: float = 0.5
    # optimization
    epochs: int = 20
    batch_size: int = 64
    seed: int = 0
    base_lr: float = 1e-3
    weight_decay: float = 0.1
    warmup_epochs: int = 5
    min_lr: float = 1e-5
    smoothing: float = 0.1
    # output
    out_dir: str = "runs"


def _coerce(raw: str, target_type):
    if target_type is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected boolean, got {raw!r}")
    return target_type(raw)


def load_config_file(path: str) -> dict:
    """Parse flat key=value lines; '#' starts a comment."""
    known = {f.name: f.type for f in fields(ExperimentConfig)}
    types = {f.name: type(getattr(ExperimentConfig(), f.name)) for f in fields(ExperimentConfig)}
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in known:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            out[key] = _coerce(value, types[key])
    return out


def build_experiment(args: argparse.Namespace) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if getattr(args, "config", None):
        cfg = replace(cfg, **load_config_file(args.config))
    overrides = {}
    for f in fields(ExperimentConfig):
        val = getattr(args, f.name, None)
        if val is not None:
            overrides[f.name] = val
    return replace(cfg, **overrides)


def _load_datasets(cfg: ExperimentConfig):
    """Returns (train set, eval set, n_classes)."""
    if cfg.data_dir:
        train_set = datamod.load_cifar100_binary(os.path.join(cfg.data_dir, "train.bin"))
        eval_set = datamod.load_cifar100_binary(os.path.join(cfg.data_dir, "test.bin"))
        return train_set, eval_set, (cfg.n_classes or 100)
    try:
        n, classes, seed = (int(p) for p in cfg.synthetic.split(","))
    except ValueError as exc:
        raise ConfigError(f"--synthetic wants n,classes,seed; got {cfg.synthetic!r}") from exc
    full = datamod.synthetic_dataset(n, classes, seed, h=cfg.image_h, w=cfg.image_w)
    n_eval = max(1, int(round(len(full) * cfg.eval_fraction)))
    return full[n_eval:], full[:n_eval], (cfg.n_classes or classes)


def _model_config(cfg: ExperimentConfig, n_classes: int) -> ModelConfig:
    return ModelConfig(
        image_h=cfg.image_h, image_w=cfg.image_w, channels=cfg.channels,
        patch=cfg.patch, dim=cfg.dim, e_dim=cfg.e_dim, n_state=cfg.n_state,
        l_total=cfg.l_total, n_classes=n_classes, k_conv=cfg.k_conv,
        use_skip=cfg.ssm_skip, head_hidden=cfg.head_hidden)


def _resolve_plan(cfg: ExperimentConfig, seq_len: int) -> sched.FusionPlan:
    strategy = sched.resolve_strategy(
        cfg.strategy, cfg.l_total,
        start=cfg.start or None, k_last=cfg.k_last or None)
    r = cfg.r if strategy.kind != "none" else 0
    return sched.build_plan(strategy, cfg.l_total, r, seq_len)


def _train_config(cfg: ExperimentConfig) -> trainmod.TrainConfig:
    return trainmod.TrainConfig(
        epochs=cfg.epochs, batch_size=cfg.batch_size, seed=cfg.seed,
        base_lr=cfg.base_lr, weight_decay=cfg.weight_decay,
        warmup_epochs=cfg.warmup_epochs, min_lr=cfg.min_lr,
        smoothing=cfg.smoothing, augment=cfg.augment,
        crop_pad=cfg.crop_pad, hflip_p=cfg.hflip_p)


def _write_trace(model, plan, eval_set, path: str) -> None:
    trace: list = []
    sample = eval_set[: min(8, len(eval_set))]
    images = np.stack([s.pixels for s in sample]).astype(model.config.np_dtype)
    from . import tensor as tn

    with tn.no_grad():
        model.forward(Tensor(images), plan, trace=trace)
    with open(path, "w") as fh:
        for layer, a, b, sim in trace:
            fh.write(f"{layer},{a},{b},{sim:.6f}\n")


def cmd_run(cfg: ExperimentConfig, trace_file: str | None = None) -> int:
    train_set, eval_set, n_classes = _load_datasets(cfg)
    mcfg = _model_config(cfg, n_classes)
    plan = _resolve_plan(cfg, mcfg.seq_len)
    os.makedirs(cfg.out_dir, exist_ok=True)
    strategy = plan.strategy
    bound = strategy.start if strategy.kind == "upper" else strategy.k_last
    tag = f"{strategy.kind}{bound or ''}_r{plan.r_per_layer}_seed{cfg.seed}"
    csv_path = os.path.join(cfg.out_dir, f"metrics_{tag}.csv")
    ckpt_path = os.path.join(cfg.out_dir, f"model_{tag}.ckpt")
    if os.path.exists(csv_path):
        os.remove(csv_path)
    model = init_model(mcfg, seed=cfg.seed)
    model.fusion_weighted = cfg.fusion_weighted
    model, metrics = trainmod.train(
        model, plan, train_set, eval_set, _train_config(cfg),
        csv_path=csv_path, checkpoint_path=ckpt_path)
    if trace_file:
        _write_trace(model, plan, eval_set, trace_file)
    last = metrics[-1]
    print(f"run complete: top1={last.top1:.4f} top5={last.top5:.4f} "
          f"token_steps={last.token_steps} csv={csv_path} checkpoint={ckpt_path}")
    return 0


def _summary_row(cfg: ExperimentConfig, plan: sched.FusionPlan, n_classes: int,
                 result: dict | None) -> list:
    total, per_layer = sched.token_steps(plan, plan.seq_len)
    strategy = plan.strategy
    row = {
        "strategy": strategy.kind,
        "r": plan.r_per_layer,
        "start_layer": strategy.start if strategy.kind == "upper" else "",
        "k_last": strategy.k_last if strategy.kind == "lower" else "",
        "budget": cfg.budget,
        "total_reduced": plan.total_reduced,
        "token_steps": total,
        "final_len": per_layer[-1],
        "dim": cfg.dim, "e_dim": cfg.e_dim, "n_state": cfg.n_state,
        "l_total": cfg.l_total, "patch": cfg.patch,
        "image_h": cfg.image_h, "image_w": cfg.image_w, "n_classes": n_classes,
        "epochs": cfg.epochs, "batch_size": cfg.batch_size, "seed": cfg.seed,
        "base_lr": cfg.base_lr,
        "top1": "", "top5": "", "train_seconds": "", "peak_live_bytes": "",
    }
    if result is not None:
        row.update(result)
    return [row[c] for c in SUMMARY_COLUMNS]


def _train_summary(cfg: ExperimentConfig, plan: sched.FusionPlan, n_classes: int) -> dict:
    train_set, eval_set, _ = _load_datasets(cfg)
    mcfg = _model_config(cfg, n_classes)
    model = init_model(mcfg, seed=cfg.seed)
    model.fusion_weighted = cfg.fusion_weighted
    memory.reset_peak()
    t0 = time.perf_counter()
    _, metrics = trainmod.train(model, plan, train_set, eval_set, _train_config(cfg))
    seconds = time.perf_counter() - t0
    last = metrics[-1]
    return {
        "top1": f"{last.top1:.6f}",
        "top5": f"{last.top5:.6f}",
        "train_seconds": f"{seconds:.3f}",
        "peak_live_bytes": max(m.peak_live_bytes for m in metrics),
    }


def _worker_count() -> int:
    raw = os.environ.get("FAMBAV_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"FAMBAV_THREADS must be an integer, got {raw!r}")


def _train_summary_job(args):
    cfg, plan, n_classes = args
    return _train_summary(cfg, plan, n_classes)


def _run_sweep(cfg: ExperimentConfig, plans: list[sched.FusionPlan], n_classes: int,
               dry_run: bool, out_path: str) -> int:
    """Train (or dry-run) one row per plan and write the summary CSV."""
    results: list[dict | None] = [None] * len(plans)
    if not dry_run:
        workers = _worker_count()
        jobs = [(cfg, plan, n_classes) for plan in plans]
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(_train_summary_job, jobs))
        else:
            results = [_train_summary_job(job) for job in jobs]
    os.makedirs(os.path.dirname(out_path) or ".", exist_ok=True)
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SUMMARY_COLUMNS)
        for plan, result in zip(plans, results):
            writer.writerow(_summary_row(cfg, plan, n_classes, result))
    print(f"wrote {out_path}")
    return 0


def _seq_len_and_classes(cfg: ExperimentConfig) -> tuple[int, int]:
    # Class count placeholder: only the patch grid matters for seq_len.
    probe = ModelConfig(image_h=cfg.image_h, image_w=cfg.image_w,
                        channels=cfg.channels, patch=cfg.patch, n_classes=2)
    n_classes = cfg.n_classes
    if not n_classes:
        if cfg.data_dir:
            n_classes = 100
        else:
            n_classes = int(cfg.synthetic.split(",")[1])
    return probe.seq_len, n_classes


def cmd_compare(cfg: ExperimentConfig, dry_run: bool) -> int:
    seq_len, n_classes = _seq_len_and_classes(cfg)
    entries = sched.parity_configs(cfg.l_total, cfg.budget)
    plans = [
        sched.build_plan(entry.strategy, cfg.l_total, entry.r_per_layer, seq_len)
        for entry in (entries[k] for k in sched.STRATEGY_KINDS)
    ]
    out_path = os.path.join(cfg.out_dir, f"compare_budget{cfg.budget}.csv")
    return _run_sweep(cfg, plans, n_classes, dry_run, out_path)


def cmd_sweep_start(cfg: ExperimentConfig, starts: list[int], dry_run: bool) -> int:
    seq_len, n_classes = _seq_len_and_classes(cfg)
    plans = []
    for start in starts:
        strategy = sched.resolve_strategy("upper", cfg.l_total, start=start)
        n_fused = len(sched.fused_layers(strategy, cfg.l_total))
        r = sched._round_half_up(cfg.budget / n_fused)
        plans.append(sched.build_plan(strategy, cfg.l_total, r, seq_len))
    out_path = os.path.join(cfg.out_dir, f"sweep_start_budget{cfg.budget}.csv")
    return _run_sweep(cfg, plans, n_classes, dry_run, out_path)


def cmd_sweep_r(cfg: ExperimentConfig, rs: list[int], dry_run: bool) -> int:
    seq_len, n_classes = _seq_len_and_classes(cfg)
    strategy = sched.resolve_strategy("upper", cfg.l_total, start=cfg.start or None)
    plans = [sched.build_plan(strategy, cfg.l_total, r, seq_len) for r in rs]
    out_path = os.path.join(cfg.out_dir, f"sweep_r_start{strategy.start}.csv")
    return _run_sweep(cfg, plans, n_classes, dry_run, out_path)


def cmd_plot(csv_paths: list[str], out_path: str) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    series: dict[str, list[tuple[int, float]]] = {}
    for path in csv_paths:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise ConfigError(f"{path}: CSV has no data rows")
        for row in rows:
            if "token_steps" not in row or "top1" not in row:
                raise ConfigError(f"{path}: missing token_steps/top1 columns")
            label = row.get("strategy", "series") or "series"
            top1 = row["top1"]
            if top1 == "":
                continue
            series.setdefault(label, []).append((int(row["token_steps"]), float(top1)))
    if not series:
        raise ConfigError("no plottable rows (train before plotting, or drop --dry-run)")
    fig, ax = plt.subplots(figsize=(6, 4))
    for label in sorted(series):
        pts = sorted(series[label])
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=label)
    ax.set_xlabel("token steps per forward pass")
    ax.set_ylabel("top-1 accuracy")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    print(f"wrote {out_path}")
    return 0


def cmd_selftest() -> int:
    from .selftest import run_selftest

    return run_selftest()


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file")
    for f in fields(ExperimentConfig):
        flag = "--" + f.name.replace("_", "-")
        default_type = type(getattr(ExperimentConfig(), f.name))
        if default_type is bool:
            group = p.add_mutually_exclusive_group()
            group.add_argument(flag, dest=f.name, action="store_const", const=True)
            group.add_argument(f"--no-{f.name.replace('_', '-')}", dest=f.name,
                               action="store_const", const=False)
        else:
            p.add_argument(flag, dest=f.name, type=default_type)


def _int_list(raw: str) -> list[int]:
    return [int(p) for p in raw.split(",") if p.strip()]


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fambav")
    sub = parser.add_subparsers(dest="verb", required=True)

    p_run = sub.add_parser("run", help="train one configuration")
    _add_config_flags(p_run)
    p_run.add_argument("--trace-file", help="write per-layer merge records here")

    p_cmp = sub.add_parser("compare", help="five strategies at one budget")
    _add_config_flags(p_cmp)
    p_cmp.add_argument("--dry-run", action="store_true",
                       help="scheduler analytics only, no training")

    p_ss = sub.add_parser("sweep-start", help="upper-layer start sweep")
    _add_config_flags(p_ss)
    p_ss.add_argument("--starts", type=_int_list, required=True)
    p_ss.add_argument("--dry-run", action="store_true")

    p_sr = sub.add_parser("sweep-r", help="pairs-per-layer sweep at fixed start")
    _add_config_flags(p_sr)
    p_sr.add_argument("--rs", type=_int_list, required=True)
    p_sr.add_argument("--dry-run", action="store_true")

    p_plot = sub.add_parser("plot", help="accuracy vs token-steps chart")
    p_plot.add_argument("csv_paths", nargs="+")
    p_plot.add_argument("--out", default="tradeoff.png")

    sub.add_parser("selftest", help="run the built-in oracle checks")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    try:
        if args.verb == "run":
            return cmd_run(build_experiment(args), trace_file=args.trace_file)
        if args.verb == "compare":
            return cmd_compare(build_experiment(args), args.dry_run)
        if args.verb == "sweep-start":
            return cmd_sweep_start(build_experiment(args), args.starts, args.dry_run)
        if args.verb == "sweep-r":
            return cmd_sweep_r(build_experiment(args), args.rs, args.dry_run)
        if args.verb == "plot":
            return cmd_plot(args.csv_paths, args.out)
        if args.verb == "selftest":
            return cmd_selftest()
        raise ConfigError(f"unknown verb {args.verb!r}")
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 3
    except (FambaError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
