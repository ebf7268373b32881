"""``okdph`` command line: train, sweep, ablate, stability, landscape, eval.

Exit codes: 0 success, 1 user or configuration error, 2 internal error.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import statistics
import sys
import traceback
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import landscape as ls
from . import nn
from .config import (ExperimentConfig, cell_seeds, derived_seed, load_config,
                     load_datasets, parse_config, with_overrides, write_effective_config)
from .data import IdxError, NoiseSpec, add_gaussian_noise, load_csv, load_idx, subsample
from .trainer import (ConfigError, FormatError, RunResult, TrainingError, build_network, evaluate,
                      load_checkpoint, load_snapshots, parse_delta, save_checkpoint, save_snapshots, train)

SWEEP_PARAMS = ("omega", "beta", "gamma", "delta")
STABILITY_MODES = {"noisy": None, "frac10": 0.10, "frac1": 0.01}
USER_ERRORS = (ConfigError, FormatError, IdxError, nn.LayoutError, nn.SpecError, ls.LandscapeError,
               FileNotFoundError)


class UsageError(ValueError):
    pass


def fmt(v: float) -> str:
    return f"{v:.17g}"


def threads() -> int:
    raw = os.environ.get("OKDPH_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"OKDPH_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"OKDPH_THREADS must be a positive integer, got {raw!r}")
    return n


def run_cells(fn, cells: list) -> list:
    """Apply ``fn`` to independent cells; results come back in cell order."""
    n = min(threads(), len(cells))
    if n <= 1:
        return [fn(c) for c in cells]
    with ThreadPoolExecutor(n) as pool:
        return list(pool.map(fn, cells))


def write_csv(path, header: list, rows: list) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) if isinstance(v, float) else v for v in r])


def mean_sd(values) -> tuple[float, float]:
    values = list(values)
    return statistics.fmean(values), (statistics.stdev(values) if len(values) > 1 else 0.0)


def prepare_out(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    exp = load_config(args.config)
    if args.seed is not None:
        exp = with_overrides(exp, seed=args.seed)
    out = prepare_out(args.out)
    write_effective_config(exp, out / "effective-config.json")
    train_set, test_set = load_datasets(exp.dataset)
    res = train(exp.train, train_set, test_set)
    write_run(res, out, args.wall_clock)
    print(f"best_acc={fmt(res.best.test_acc)} model={res.best.model} epoch={res.best.epoch}")
    return 0


def write_run(res: RunResult, out: Path, wall_clock: bool = False) -> None:
    from .plotting import plot_metrics

    res.metrics.to_csv(out / "metrics.csv", wall_clock=wall_clock)
    save_snapshots(out / "snapshots.bin", res.spec, res.snapshots)
    save_checkpoint(out / "best.ckpt", res.spec, res.best)
    plot_metrics(res.metrics, [out / "metrics.svg", out / "metrics.png"], title=res.config.method)


# ---------------------------------------------------------------------------
# multi-run drivers


def parse_sweep_values(param: str, values) -> list:
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"sweep parameter must be one of {SWEEP_PARAMS}, got {param!r}")
    if isinstance(values, str):
        values = [v for v in values.split(",") if v.strip()]
    if not values:
        raise ConfigError("sweep needs at least one value")
    out = []
    for v in values:
        if param == "delta":
            out.append(parse_delta(v))
        else:
            try:
                out.append(float(v))
            except (TypeError, ValueError):
                raise ConfigError(f"bad {param} value {v!r}") from None
    return out


def sweep_label(param: str, value) -> str:
    if param == "delta":
        n, unit = value
        return f"{n}{unit[0]}"
    return f"{value:g}"


def sweep_override(param: str, value) -> dict:
    if param == "delta":
        return {"delta": value[0], "delta_unit": value[1]}
    return {param: value}


def best_of(exp: ExperimentConfig, datasets, seed: int, **overrides) -> float:
    cfg = with_overrides(exp, seed=seed, **overrides).train
    return train(cfg, *datasets).best.test_acc


def cmd_sweep(args) -> int:
    exp = load_config(args.config)
    block = exp.experiment.get("sweep") or {}
    param = args.param or block.get("param")
    values = args.values if args.values is not None else block.get("values")
    if param is None or values is None:
        raise ConfigError("sweep needs --param and --values (or an experiment.sweep block)")
    parsed = parse_sweep_values(param, values)
    k = args.seeds or exp.experiment["seeds"]
    exp.experiment = {**exp.experiment, "seeds": k,
                      "sweep": {"param": param, "values": [sweep_label(param, v) for v in parsed]}}
    for v in parsed:  # validate every value before any training
        with_overrides(exp, **sweep_override(param, v))
    out = prepare_out(args.out)
    write_effective_config(exp, out / "effective-config.json")
    datasets = load_datasets(exp.dataset)
    cells = [(v, s) for v in parsed for s in cell_seeds(exp, k)]
    accs = run_cells(lambda c: best_of(exp, datasets, c[1], **sweep_override(param, c[0])), cells)
    rows = [(param, sweep_label(param, v), s, a) for (v, s), a in zip(cells, accs)]
    write_csv(out / "sweep.csv", ["param", "value", "seed", "best_acc"], rows)
    summary = []
    for v in parsed:
        label = sweep_label(param, v)
        m, sd = mean_sd(a for p, lab, _, a in rows if lab == label)
        summary.append((param, label, m, sd, k))
        print(f"{param}={label} mean_best_acc={fmt(m)} sd={fmt(sd)} n={k}")
    write_csv(out / "sweep-summary.csv", ["param", "value", "mean_best_acc", "sd", "n"], summary)
    from .plotting import plot_summary
    plot_summary([s[1] for s in summary], [s[2] for s in summary], [s[3] for s in summary],
                 [out / "sweep.svg", out / "sweep.png"], title=f"sweep over {param}")
    return 0


def ablation_stages(exp: ExperimentConfig) -> list[tuple[str, str, dict]]:
    """Cumulative stages: CE only, + ensemble distillation, + fusion, + HWM CE."""
    cfg = exp.train.resolved()
    return [
        ("1_ce", "base", {}),
        ("2_kd", "okdph", {"omega": 1.0, "beta": cfg.beta, "gamma": 0.0}),
        ("3_fuse", "okdph", {"omega": 1.0, "beta": cfg.beta, "gamma": cfg.gamma}),
        ("4_hwm_ce", "okdph", {"omega": cfg.omega, "beta": cfg.beta, "gamma": cfg.gamma}),
    ]


def cmd_ablate(args) -> int:
    exp = load_config(args.config)
    k = args.seeds or exp.experiment["seeds"]
    exp.experiment = {**exp.experiment, "seeds": k}
    stages = ablation_stages(exp)
    if stages[3][2]["omega"] >= 1.0:
        raise ConfigError("ablation needs omega < 1 so that stage 4 adds the HWM cross-entropy term")
    out = prepare_out(args.out)
    write_effective_config(exp, out / "effective-config.json")
    datasets = load_datasets(exp.dataset)
    cells = [(st, s) for st in stages for s in cell_seeds(exp, k)]
    accs = run_cells(lambda c: best_of(exp, datasets, c[1], method=c[0][1], **c[0][2]), cells)
    rows = [(st[0], s, a) for (st, s), a in zip(cells, accs)]
    write_csv(out / "ablate.csv", ["stage", "seed", "best_acc"], rows)
    summary, prev, first = [], None, None
    for name, _, _ in stages:
        m, sd = mean_sd(a for st, _, a in rows if st == name)
        first = m if first is None else first
        delta_prev = 0.0 if prev is None else m - prev
        summary.append((name, m, sd, delta_prev, m - first))
        print(f"stage={name} mean_best_acc={fmt(m)} delta_prev={fmt(delta_prev)} delta_stage1={fmt(m - first)}")
        prev = m
    write_csv(out / "ablate-summary.csv", ["stage", "mean_best_acc", "sd", "delta_prev", "delta_stage1"], summary)
    from .plotting import plot_summary
    plot_summary([s[0] for s in summary], [s[1] for s in summary], [s[2] for s in summary],
                 [out / "ablate.svg", out / "ablate.png"], title="cumulative ablation")
    return 0


def corrupt(mode: str, train_set, exp: ExperimentConfig, seed: int):
    """Noisy or subsampled training split for one paired repetition."""
    data_seed = derived_seed(seed, 7)
    if mode == "noisy":
        st = exp.experiment["stability"]
        return add_gaussian_noise(train_set, NoiseSpec(st["noise_mean"], st["noise_variance"]), data_seed)
    return subsample(train_set, STABILITY_MODES[mode], data_seed)


def cmd_stability(args) -> int:
    exp = load_config(args.config)
    k = args.seeds or exp.experiment["seeds"]
    exp.experiment = {**exp.experiment, "seeds": k}
    out = prepare_out(args.out)
    write_effective_config(exp, out / "effective-config.json")
    train_set, test_set = load_datasets(exp.dataset)
    seeds = cell_seeds(exp, k)
    corrupted = {s: corrupt(args.mode, train_set, exp, s) for s in seeds}
    cells = [(m, s) for m in ("okdph", "base") for s in seeds]
    accs = run_cells(lambda c: best_of(exp, (corrupted[c[1]], test_set), c[1], method=c[0]), cells)
    rows = [(args.mode, m, s, len(corrupted[s]), a) for (m, s), a in zip(cells, accs)]
    write_csv(out / "stability.csv", ["mode", "method", "seed", "n_train", "best_acc"], rows)
    summary = []
    for m in ("okdph", "base"):
        mean, sd = mean_sd(a for _, meth, _, _, a in rows if meth == m)
        summary.append((args.mode, m, mean, sd, k))
        print(f"mode={args.mode} method={m} mean_best_acc={fmt(mean)} sd={fmt(sd)} n={k}")
    write_csv(out / "stability-summary.csv", ["mode", "method", "mean_best_acc", "sd", "n"], summary)
    print(f"test_checksum={test_set.checksum()}")
    from .plotting import plot_summary
    plot_summary([s[1] for s in summary], [s[2] for s in summary], [s[3] for s in summary],
                 [out / "stability.svg", out / "stability.png"], title=f"stability: {args.mode}")
    return 0


# ---------------------------------------------------------------------------
# landscape and eval


def run_label(run_dir: Path, method: str, taken: set) -> str:
    label = method if method not in taken else f"{method}@{run_dir.name}"
    taken.add(label)
    return label


def cmd_landscape(args) -> int:
    runs = [Path(r) for r in args.runs]
    logs, labels, taken = [], [], set()
    for r in runs:
        spec, log = load_snapshots(r / "snapshots.bin")
        method = json.loads((r / "effective-config.json").read_text()).get("method", r.name)
        logs.append((r, spec, log))
        labels.append(run_label(r, method, taken))
    first = logs[0]
    for r, spec, log in logs[1:]:
        if spec.digest() != first[1].digest() or log.layout != first[2].layout:
            raise nn.LayoutError(f"runs {first[0]} and {r} use different networks; "
                                 "trajectories can only share a plane when layouts match")
    exp = parse_config(json.loads((runs[0] / "effective-config.json").read_text()), runs[0])
    train_set, _ = load_datasets(exp.dataset)
    spec = first[1]
    trajectories, vectors = {}, []
    for label, (_, _, log) in zip(labels, logs):
        for tag in log.tags():
            traj = log.trajectory(tag)
            trajectories[f"{label}:{tag}"] = traj
            vectors.extend(p for _, p in traj)
    plane = ls.pca_plane(vectors, ls.MAX_SNAPSHOTS)
    res = args.resolution or exp.experiment["landscape"]["resolution"]
    rows = ls.project_trajectories(plane, trajectories)
    extents = ls.auto_extents([(u, v) for _, _, u, v, _ in rows], exp.experiment["landscape"]["margin"])
    grid = ls.eval_loss_grid(plane, extents, res, spec, train_set, workers=threads())
    out = prepare_out(args.out)
    paths = ls.export_landscape(grid, trajectories, out)
    sh = exp.experiment["sharpness"]
    sharp_rows = []
    for label, r in zip(labels, runs):
        _, ck = load_checkpoint(r / "best.ckpt")
        sigma = ls.relative_sigma(ck.params, sh["scale"])
        rep = ls.sharpness(ck.params, spec, train_set, sigma, sh["samples"], seed=derived_seed(exp.train.seed, 11))
        sharp_rows.append((label, ck.model, sigma, sh["samples"], rep.baseline_loss, rep.mean_increase,
                           rep.max_increase))
    write_csv(out / "sharpness.csv", ["run", "model", "sigma", "samples", "baseline_loss", "mean_increase",
                                      "max_increase"], sharp_rows)
    f1, f2 = plane.explained
    print(f"plane_variance={fmt(f1)},{fmt(f2)} snapshots={plane.count} cells={res * res} "
          f"trajectories={len(trajectories)} svg={paths['svg']}")
    return 0


def load_eval_dataset(text: str):
    """``idx:IMAGES:LABELS``, ``csv:PATH`` or a config JSON path (its test split)."""
    kind, _, rest = text.partition(":")
    if kind == "idx":
        images, _, labels = rest.partition(":")
        return None, load_idx(images, labels, split="test")
    if kind == "csv":
        return None, load_csv(rest, split="test")
    exp = load_config(text)
    return exp, load_datasets(exp.dataset)[1]


def cmd_eval(args) -> int:
    spec, ck = load_checkpoint(args.ckpt)
    exp, ds = load_eval_dataset(args.dataset)
    if exp is not None:
        wanted = build_network(exp.train.network, ds)
        if wanted.digest() != spec.digest():
            raise ConfigError(f"checkpoint network hash {spec.digest()[:12]} does not match the requested "
                              f"network {exp.train.network!r} ({wanted.digest()[:12]})")
    if ds.num_classes != spec.num_classes:
        raise ConfigError(f"dataset has {ds.num_classes} classes but the checkpoint predicts {spec.num_classes}")
    if tuple(ds.input_shape) != tuple(spec.input_shape):
        raise ConfigError(f"dataset inputs {ds.input_shape} do not match network input {spec.input_shape}")
    echo = {"ckpt": str(Path(args.ckpt).resolve()), "dataset": args.dataset, "model": ck.model,
            "epoch": ck.epoch, "network": spec.digest()}
    print(json.dumps(echo, sort_keys=True), file=sys.stderr)
    print(f"test_acc={fmt(evaluate(spec, ck.params, ds))} n={len(ds)}")
    return 0


# ---------------------------------------------------------------------------


class Parser(argparse.ArgumentParser):
    def error(self, message):
        # bad flags are a user error: exit 1, not argparse's default 2
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    ap = Parser(prog="okdph", description="Online distillation with parameter hybridization.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one configured method")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--wall-clock", action="store_true", help="write real wall times (breaks byte determinism)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sweep", help="one-at-a-time hyperparameter sweep")
    p.add_argument("--config", required=True)
    p.add_argument("--param", choices=SWEEP_PARAMS)
    p.add_argument("--values", help="comma-separated, e.g. 0,0.5,1 or 1b,5b,1e for delta")
    p.add_argument("--seeds", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("ablate", help="cumulative four-stage ablation")
    p.add_argument("--config", required=True)
    p.add_argument("--seeds", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("stability", help="okdph vs base on noisy or subsampled training data")
    p.add_argument("--config", required=True)
    p.add_argument("--mode", required=True, choices=tuple(STABILITY_MODES))
    p.add_argument("--seeds", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_stability)

    p = sub.add_parser("landscape", help="joint PCA loss landscape of saved runs")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--resolution", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_landscape)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dataset", required=True, help="config.json, idx:IMAGES:LABELS or csv:PATH")
    p.set_defaults(fn=cmd_eval)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (UsageError, TrainingError) as e:
        code = 1 if isinstance(e, UsageError) else 2
        print(f"error: {e}", file=sys.stderr)
        return code
    except USER_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - last-resort reporting with a code
        traceback.print_exc(file=sys.stderr)
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
