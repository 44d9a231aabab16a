"""Config-driven experiment runner.

Subcommands: ``run`` (multi-seed task-sequential training), ``eval``
(score one checkpoint), ``lmc`` (interpolation scan between two
checkpoints), ``landscape`` (2-D loss grid around an origin model),
``quadcheck`` (closed-form verification suites), ``report`` (metric
tables with optional improvement rows).  Every artifact embeds the
config digest; exit codes are 0 success, 1 usage/config error, 2
assertion failure, 3 partial-run I/O failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint
from .config import ConfigError, ExperimentConfig
from .geometry import (
    EvalSet,
    default_lambda_grid,
    grid_manifest,
    grid_to_csv,
    landscape_grid,
    lmc_scan,
    reconcile_params,
    scan_manifest,
    scan_to_csv,
)
from .metrics import (
    MetricsReport,
    aggregate_reports,
    avg_improvement,
    render_metrics_table,
)
from .network import evaluate_accuracy, evaluate_loss
from .quadratic import (
    QuadraticTask,
    converged_chain,
    diagonalized_comparison,
    forgetting_and_bound,
    power_iteration,
    proposition1_predict,
    random_psd_instance,
    solve_incremental,
)
from .training import TrainingError, run_sequence, write_run_record

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_ASSERT = 2
EXIT_IO = 3

OUTPUT_ROOT_ENV = "IVTLAB_OUTPUT_ROOT"


def _resolve_output(explicit, default_name: str) -> Path:
    if explicit:
        return Path(explicit)
    return Path(os.environ.get(OUTPUT_ROOT_ENV, ".")) / default_name


def _parse_seeds(text: str) -> list[int]:
    return [int(s) for s in text.split(",") if s.strip() != ""]


# ---------------------------------------------------------------------------
# run


def cmd_run(args) -> int:
    cfg = ExperimentConfig.from_file(args.config)
    out = _resolve_output(args.output or cfg.output(), f"run_{cfg.digest[:12]}")
    bundle_path = out / "bundle.json"
    if bundle_path.exists() and not args.force:
        print(f"refusing to overwrite {bundle_path} (use --force)", file=sys.stderr)
        return EXIT_USAGE
    seeds = _parse_seeds(args.seeds) if args.seeds else cfg.seeds()
    dataset = cfg.dataset()
    stream = cfg.stream(dataset)
    reports: list[MetricsReport] = []
    per_seed = []
    for seed in seeds:
        method = cfg.method(seed=seed)
        seed_dir = out / f"seed_{seed}"
        try:
            record = run_sequence(
                stream,
                method,
                hidden_dims=cfg.hidden_dims(),
                activation=cfg.activation(),
                config_digest=cfg.digest,
                out_dir=seed_dir,
                overall_mode=cfg.overall_mode(),
            )
        except TrainingError as exc:
            write_run_record(exc.partial, seed_dir)
            (seed_dir / "RECOVERY_NOTE.txt").write_text(
                f"run aborted during task {exc.task_id}: {exc.__cause__}\n"
                f"partial record retained for post-mortem\n",
                encoding="utf-8",
            )
            print(f"seed {seed}: {exc} ({exc.__cause__})", file=sys.stderr)
            return EXIT_IO
        reports.append(record.metrics)
        per_seed.append({"seed": seed, **record.metrics.as_dict()})
        print(f"seed {seed}: AA={record.metrics.aa:.4f} LA={record.metrics.la:.4f}")
    aggregate = aggregate_reports(reports)
    bundle = {
        "tool_version": __version__,
        "config_digest": cfg.digest,
        "dataset_digest": cfg.dataset_digest,
        "seeds": seeds,
        "per_seed": per_seed,
        "aggregate": aggregate,
    }
    out.mkdir(parents=True, exist_ok=True)
    bundle_path.write_text(json.dumps(bundle, indent=2, sort_keys=True), encoding="utf-8")
    table = render_metrics_table([(out.name, aggregate)])
    (out / "report.txt").write_text(
        f"# config_digest={cfg.digest}\n{table}\n", encoding="utf-8"
    )
    print(table)
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def _eval_sets_from_config(cfg: ExperimentConfig, scope, task_filter=None) -> list[EvalSet]:
    stream = cfg.stream()
    sets = []
    scope_set = set(scope)
    for task in stream.tasks:
        if task_filter is not None and task.task_id not in task_filter:
            continue
        if not set(task.class_ids) <= scope_set:
            continue
        sets.append(
            EvalSet(
                name=f"task_{task.task_id}",
                features=task.test.features,
                labels=task.test.labels,
                class_scope=tuple(scope),
            )
        )
    return sets


def cmd_eval(args) -> int:
    cfg = ExperimentConfig.from_file(args.config)
    ckpt = load_checkpoint(args.checkpoint)
    scope = ckpt.params.layout.head_classes
    task_filter = set(_parse_seeds(args.tasks)) if args.tasks else None
    sets = _eval_sets_from_config(cfg, scope, task_filter)
    if not sets:
        print("no evaluable tasks within the checkpoint's head", file=sys.stderr)
        return EXIT_USAGE
    print(f"checkpoint task_index={ckpt.meta.task_index} classes={len(scope)}")
    correct = 0
    total = 0
    for es in sets:
        acc = evaluate_accuracy(ckpt.params, es.features, es.labels, es.class_scope)
        loss = evaluate_loss(ckpt.params, es.features, es.labels, es.class_scope)
        correct += round(acc * len(es))
        total += len(es)
        print(f"{es.name}: accuracy={acc!r} loss={loss!r}")
    print(f"pooled: accuracy={correct / total!r}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# lmc


def cmd_lmc(args) -> int:
    cfg = ExperimentConfig.from_file(args.config)
    a = load_checkpoint(args.checkpoint_a)
    b = load_checkpoint(args.checkpoint_b)
    scope = b.params.layout.head_classes
    task_filter = set(_parse_seeds(args.tasks)) if args.tasks else None
    sets = _eval_sets_from_config(cfg, scope, task_filter)
    if not sets:
        print("no evaluable tasks within the target checkpoint's head", file=sys.stderr)
        return EXIT_USAGE
    try:
        anchor = reconcile_params(a.params, b.params)
        diff = float(np.linalg.norm(b.params.values - anchor.values))
        if diff == 0.0:
            raise ValueError("checkpoints are identical (zero displacement)")
        grid = default_lambda_grid(diff, points=args.points)
        scan = lmc_scan(a.params, b.params, grid, sets)
    except ValueError as exc:
        print(f"lmc: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = _resolve_output(args.output, "lmc_scan")
    out.mkdir(parents=True, exist_ok=True)
    (out / "scan.csv").write_text(scan_to_csv(scan, cfg.digest), encoding="utf-8")
    manifest = scan_manifest(scan, cfg.digest)
    manifest["endpoints"] = {
        "anchor": {"path": str(args.checkpoint_a), "config_digest": a.meta.config_digest},
        "target": {"path": str(args.checkpoint_b), "config_digest": b.meta.config_digest},
    }
    (out / "scan_manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8"
    )
    print(f"wrote {out / 'scan.csv'} ({len(scan.lambda_grid)} points, lambda_hat={scan.lambda_hat!r})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# landscape


def cmd_landscape(args) -> int:
    cfg = ExperimentConfig.from_file(args.config)
    origin = load_checkpoint(args.origin)
    model_a = load_checkpoint(args.model_a)
    model_b = load_checkpoint(args.model_b)
    if model_a.params.layout != model_b.params.layout:
        print("landscape: the two direction models must share a layout", file=sys.stderr)
        return EXIT_USAGE
    try:
        base = reconcile_params(origin.params, model_a.params)
        dir_a = model_a.params.with_values(model_a.params.values - base.values)
        dir_b = model_b.params.with_values(model_b.params.values - base.values)
        scope = model_a.params.layout.head_classes
        task_filter = set(_parse_seeds(args.tasks)) if args.tasks else None
        sets = _eval_sets_from_config(cfg, scope, task_filter)
        if not sets:
            print("no evaluable tasks within scope", file=sys.stderr)
            return EXIT_USAGE
        pooled = EvalSet(
            name="seen_pooled",
            features=np.vstack([es.features for es in sets]),
            labels=np.concatenate([es.labels for es in sets]),
            class_scope=tuple(scope),
        )
        if args.extents:
            extents = tuple(float(x) for x in args.extents.split(","))
            if len(extents) != 4:
                raise ValueError("--extents wants amin,amax,bmin,bmax")
        else:
            norm_a = float(np.linalg.norm(dir_a.values))
            ortho = dir_b.values - (dir_b.values @ dir_a.values) / norm_a**2 * dir_a.values
            norm_b = float(np.linalg.norm(ortho))
            extents = (-0.25 * norm_a, 1.25 * norm_a, -0.25 * max(norm_b, 1e-9), 1.25 * max(norm_b, 1e-9))
        grid = landscape_grid(base, dir_a, dir_b, extents, args.resolution, pooled)
    except ValueError as exc:
        print(f"landscape: {exc}", file=sys.stderr)
        return EXIT_USAGE
    grid.project("origin", base)
    grid.project("model_a", model_a.params)
    grid.project("model_b", model_b.params)
    for item in args.project or []:
        name, _, path = item.partition("=")
        if not path:
            print(f"--project wants NAME=CHECKPOINT, got {item!r}", file=sys.stderr)
            return EXIT_USAGE
        grid.project(name, load_checkpoint(path).params)
    out = _resolve_output(args.output, "landscape")
    out.mkdir(parents=True, exist_ok=True)
    (out / "grid.csv").write_text(grid_to_csv(grid, cfg.digest), encoding="utf-8")
    (out / "grid_manifest.json").write_text(
        json.dumps(grid_manifest(grid, cfg.digest), indent=2, sort_keys=True), encoding="utf-8"
    )
    print(f"wrote {out / 'grid.csv'} ({grid.losses.size} points)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# quadcheck


def cmd_quadcheck(args) -> int:
    failures: list[str] = []
    rows: list[tuple] = []
    rng_dims = list(range(2, args.dim + 1)) or [2]

    def trial_dim(trial: int) -> int:
        return rng_dims[trial % len(rng_dims)]

    # exactness of the two-task prediction with converged anchors
    max_gap2 = 0.0
    for trial in range(args.trials):
        rng = np.random.default_rng([args.seed, 2, trial])
        tasks = random_psd_instance(trial_dim(trial), 2, rng)
        if args.corrupt_psd and trial == 0:
            bad = tasks[0].A.copy()
            bad[0, 0] = -1.0
            try:
                tasks[0] = QuadraticTask(A=bad, mu=tasks[0].mu)
            except ValueError as exc:
                failures.append(f"psd-guard: {exc}")
                break
        comp = diagonalized_comparison(tasks, 2)
        rows.append((trial, 2, trial_dim(trial), comp.gap_full, comp.gap_diag))
        max_gap2 = max(max_gap2, comp.gap_full)
    if not args.corrupt_psd and max_gap2 > 1e-10:
        failures.append(f"two-task exactness: max gap {max_gap2:.3e} > 1e-10")

    # three-task gaps are reported, not asserted
    gaps3 = []
    for trial in range(args.trials):
        rng = np.random.default_rng([args.seed, 3, trial])
        tasks = random_psd_instance(trial_dim(trial), 3, rng)
        comp = diagonalized_comparison(tasks, 3)
        rows.append((trial, 3, trial_dim(trial), comp.gap_full, comp.gap_diag))
        gaps3.append(comp.gap_full)

    # equal cumulative curvature must give the exact midpoint
    worst_mid = 0.0
    for trial in range(min(args.trials, 50)):
        rng = np.random.default_rng([args.seed, 4, trial])
        d = trial_dim(trial)
        tasks = random_psd_instance(d, 2, rng)
        chain = converged_chain(tasks, 1)
        theta_prev = chain.theta_stars[0]
        H = chain.H_bars[0]
        theta_t = solve_incremental(tasks, 2, theta_prev, H)
        mid = proposition1_predict(theta_prev, theta_t, H, H)
        worst_mid = max(worst_mid, float(np.max(np.abs(mid - (theta_t + theta_prev) / 2.0))))
    if worst_mid > 1e-12:
        failures.append(f"midpoint observation: max deviation {worst_mid:.3e} > 1e-12")

    # spectral forgetting bound
    for trial in range(50):
        rng = np.random.default_rng([args.seed, 5, trial])
        d = trial_dim(trial)
        G = rng.standard_normal((d, d))
        H = G.T @ G + 1e-6 * np.eye(d)
        theta1 = rng.standard_normal(d)
        delta = rng.standard_normal(d)
        forgetting, bound = forgetting_and_bound(H, theta1 + delta, theta1)
        if forgetting > bound.bound_value * (1.0 + 1e-12) + 1e-15:
            failures.append(f"forgetting bound violated on trial {trial}")
            break
        lam, vec = power_iteration(H)
        f_top, b_top = forgetting_and_bound(H, theta1 + vec, theta1)
        if abs(f_top - b_top.bound_value) > 1e-9 * max(1.0, b_top.bound_value):
            failures.append(f"top-eigenvector equality off on trial {trial}")
            break

    out = _resolve_output(args.output, "quadcheck")
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "quadcheck.csv"
    lines = ["trial,t,dim,gap_full,gap_diag\n"]
    for trial, t, d, gf, gd in rows:
        lines.append(f"{trial},{t},{d},{gf!r},{gd!r}\n")
    csv_path.write_text("".join(lines), encoding="utf-8")
    summary = {
        "trials": args.trials,
        "max_gap_t2": max_gap2,
        "median_gap_t3": float(np.median(gaps3)) if gaps3 else None,
        "midpoint_max_deviation": worst_mid,
        "failures": failures,
        "per_trial_csv": str(csv_path),
    }
    (out / "quadcheck_summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True), encoding="utf-8"
    )
    print(f"two-task max gap: {max_gap2:.3e}")
    if gaps3:
        print(f"three-task median gap: {float(np.median(gaps3)):.3e}")
    print(f"per-trial results: {csv_path}")
    if failures:
        for f in failures:
            print(f"FAIL: {f}", file=sys.stderr)
        return EXIT_ASSERT
    print("all quadratic checks passed")
    return EXIT_OK


# ---------------------------------------------------------------------------
# report


def _load_bundle(path: Path) -> tuple[dict, Path]:
    bundle_file = path / "bundle.json" if path.is_dir() else path
    return json.loads(bundle_file.read_text(encoding="utf-8")), bundle_file


def _reports_of(bundle: dict) -> list[MetricsReport]:
    return [
        MetricsReport(aa=e["AA"], la=e["LA"], fm=e["FM"]) for e in bundle["per_seed"]
    ]


def cmd_report(args) -> int:
    bundles = []
    for p in args.bundles:
        doc, path = _load_bundle(Path(p))
        bundles.append((Path(p).name, doc, path))
    digests = {doc["dataset_digest"] for _, doc, _ in bundles}
    if len(digests) > 1:
        print("report: bundles were produced on different datasets; refusing", file=sys.stderr)
        return EXIT_USAGE
    entries = [(name, doc["aggregate"]) for name, doc, _ in bundles]
    improvements = []
    by_name = {name: doc for name, doc, _ in bundles}
    for pair in args.pair or []:
        before_name, _, after_name = pair.partition(":")
        if before_name not in by_name or after_name not in by_name:
            print(f"report: --pair {pair!r} names unknown bundles", file=sys.stderr)
            return EXIT_USAGE
        deltas = avg_improvement(
            _reports_of(by_name[before_name]), _reports_of(by_name[after_name])
        )
        improvements.append((f"Avg. Imp. ({after_name} vs {before_name})", deltas))
    print(render_metrics_table(entries, improvements))
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ivtlab",
        description="continual-learning experiments with increment vector transformation",
    )
    parser.add_argument("--version", action="version", version=f"ivtlab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train a config across seeds and bundle the metrics")
    p.add_argument("config")
    p.add_argument("--output", help="bundle directory (default from config or env)")
    p.add_argument("--seeds", help="comma-separated override of the config's seed list")
    p.add_argument("--force", action="store_true", help="overwrite an existing bundle")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="score one checkpoint on the config's task stream")
    p.add_argument("checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--tasks", help="comma-separated task ids (default: all in scope)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("lmc", help="interpolation scan between two checkpoints")
    p.add_argument("checkpoint_a")
    p.add_argument("checkpoint_b")
    p.add_argument("--config", required=True)
    p.add_argument("--tasks", help="comma-separated task ids to evaluate")
    p.add_argument("--points", type=int, default=41)
    p.add_argument("--output")
    p.set_defaults(func=cmd_lmc)

    p = sub.add_parser("landscape", help="2-D loss grid spanned by two models around an origin")
    p.add_argument("origin")
    p.add_argument("model_a")
    p.add_argument("model_b")
    p.add_argument("--config", required=True)
    p.add_argument("--tasks", help="comma-separated task ids pooled into the eval set")
    p.add_argument("--extents", help="amin,amax,bmin,bmax (default: frame the models)")
    p.add_argument("--resolution", type=int, default=25)
    p.add_argument("--project", action="append", metavar="NAME=CKPT")
    p.add_argument("--output")
    p.set_defaults(func=cmd_landscape)

    p = sub.add_parser("quadcheck", help="closed-form verification suites")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--dim", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt-psd", action="store_true", help=argparse.SUPPRESS)
    p.add_argument("--output")
    p.set_defaults(func=cmd_quadcheck)

    p = sub.add_parser("report", help="metric tables across bundles, with optional pairs")
    p.add_argument("bundles", nargs="+")
    p.add_argument(
        "--pair",
        action="append",
        metavar="BEFORE:AFTER",
        help="bundle names to difference as an Avg. Imp. row",
    )
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"i/o failure: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
