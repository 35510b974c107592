"""Command-line entry point.

Subcommands: gen-data (synthetic worlds), run (one experiment scenario),
eval (checkpoint against a dataset), report (merge scenario outputs), and
solve (single-sample pose refinement for debugging). Exit code 0 on success,
2 for configuration problems, 3 for runtime failures.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path


class ConfigError(Exception):
    pass


def _cmd_gen_data(args) -> int:
    from . import world

    cfg = {"n_clients": 4, "per_client": 200, "test_count": 100, "seed": 0}
    if args.config:
        try:
            with open(args.config) as f:
                raw = json.load(f)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        unknown = set(raw) - set(cfg)
        if unknown:
            raise ConfigError(f"unknown gen-data config keys: {sorted(unknown)}")
        cfg.update(raw)
    if args.seed is not None:
        cfg["seed"] = args.seed
    manifest = world.make_client_datasets(
        n_clients=int(cfg["n_clients"]), per_client=int(cfg["per_client"]),
        test_count=int(cfg["test_count"]), seed=int(cfg["seed"]), out_dir=args.out,
    )
    total = sum(c["count"] for c in manifest["clients"]) + manifest["test"]["count"]
    print(f"wrote {total} samples for {len(manifest['clients'])} clients "
          f"+ test set to {args.out}")
    return 0


def _cmd_run(args) -> int:
    from .federation import ExperimentConfig, run_experiment

    try:
        cfg = ExperimentConfig.from_json(args.config)
    except (OSError, json.JSONDecodeError, ValueError, TypeError) as exc:
        raise ConfigError(f"bad experiment config: {exc}") from exc
    if args.workers is not None:
        cfg.workers = args.workers
    if args.out is not None:
        cfg.out_dir = args.out
    bundle = run_experiment(cfg)
    finals = {f"{fam}@{th:g}": f"{val:.2f}%" for (fam, th), val in sorted(bundle.final_recall.items())}
    print(f"scenario {cfg.scenario}: {cfg.rounds} rounds done -> {bundle.out_dir}")
    print("final-round recalls:", json.dumps(finals, indent=1))
    return 0


def _cmd_eval(args) -> int:
    from .features import load_params
    from .federation import write_metrics_csv
    from .metrics import compute_metrics
    from .solver import SolverConfig
    from .training import TrainConfig, evaluate_pose_errors
    from .world import load_test_dataset

    try:
        params = load_params(args.checkpoint)
        dataset = load_test_dataset(args.data)
    except (OSError, KeyError, ValueError) as exc:
        raise ConfigError(f"cannot load checkpoint/data: {exc}") from exc
    cfg = TrainConfig(solver=SolverConfig(max_iters_per_level=args.tau))
    errors = evaluate_pose_errors(params, dataset, cfg)
    report = compute_metrics(errors)
    rows = [("eval", 0, fam, th, val) for fam, th, val in report.rows()]
    write_metrics_csv(args.out, rows)
    print(report.format_table())
    print(f"wrote {args.out}")
    return 0


def _cmd_report(args) -> int:
    from .report import generate_report

    try:
        result = generate_report(args.in_dirs, args.out, svg=args.svg)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot build report: {exc}") from exc
    print(result["text"])
    print("\nwrote", ", ".join(str(p) for p in result["outputs"].values()))
    return 0


def _cmd_solve(args) -> int:
    import numpy as np

    from .features import forward_pyramid, identity_pyramid, load_params
    from .solver import SolverConfig, solve_coarse_to_fine
    from .tensor import Tensor, no_grad
    from .training import decompose_pose_error
    from .world import load_client_dataset, load_test_dataset

    try:
        ds = (load_test_dataset(args.data) if args.client == "test"
              else load_client_dataset(args.data, int(args.client)))
        sample = ds.samples[args.index]
    except (OSError, KeyError, IndexError, ValueError) as exc:
        raise ConfigError(f"cannot load sample: {exc}") from exc
    if args.checkpoint:
        try:
            params = load_params(args.checkpoint)
        except (OSError, KeyError, ValueError) as exc:
            raise ConfigError(f"cannot load checkpoint: {exc}") from exc
        with no_grad():
            pyr_s = forward_pyramid(Tensor(sample.aerial), params.branch("sat"))
            pyr_g = forward_pyramid(Tensor(sample.ground), params.branch("grd"))
    else:
        pyr_s = identity_pyramid(sample.aerial)
        pyr_g = identity_pyramid(sample.ground)
    cfg = SolverConfig(max_iters_per_level=args.tau)
    with no_grad():
        final, trace = solve_coarse_to_fine(sample.init_pose, pyr_s, pyr_g,
                                            sample.intr, sample.georef, cfg, strict=False)
    lat, lon, yaw = decompose_pose_error(final, sample.gt_pose)
    print(f"init  pose: x={sample.init_pose.x_m:+.3f} y={sample.init_pose.y_m:+.3f} "
          f"yaw={np.degrees(sample.init_pose.yaw_rad):+.2f}deg")
    print(f"final pose: x={final.x_m:+.3f} y={final.y_m:+.3f} yaw={np.degrees(final.yaw_rad):+.2f}deg")
    print(f"gt    pose: x={sample.gt_pose.x_m:+.3f} y={sample.gt_pose.y_m:+.3f} "
          f"yaw={np.degrees(sample.gt_pose.yaw_rad):+.2f}deg")
    print(f"errors: lateral {lat:.3f} m, longitudinal {lon:.3f} m, azimuth {yaw:.3f} deg "
          f"({len(trace)} iterations)")
    if args.dump_trace:
        trace.dump(args.dump_trace)
        print(f"trace -> {args.dump_trace}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedcvgl",
                                description="Federated cross-view geo-localization simulator")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate synthetic client datasets")
    g.add_argument("--config", help="JSON with n_clients/per_client/test_count/seed")
    g.add_argument("--out", required=True, help="output dataset directory")
    g.add_argument("--seed", type=int, default=None)
    g.set_defaults(fn=_cmd_gen_data)

    r = sub.add_parser("run", help="run one experiment scenario")
    r.add_argument("--config", required=True, help="experiment JSON")
    r.add_argument("--workers", type=int, default=None)
    r.add_argument("--out", default=None, help="override out_dir")
    r.set_defaults(fn=_cmd_run)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset's test split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", default="metrics.csv")
    e.add_argument("--tau", type=int, default=5)
    e.set_defaults(fn=_cmd_eval)

    rep = sub.add_parser("report", help="merge scenario outputs into comparison tables")
    rep.add_argument("--in", dest="in_dirs", nargs="+", required=True)
    rep.add_argument("--out", required=True)
    rep.add_argument("--svg", action="store_true", help="also emit recall-vs-round charts")
    rep.set_defaults(fn=_cmd_report)

    s = sub.add_parser("solve", help="single-sample pose solve")
    s.add_argument("--data", required=True)
    s.add_argument("--client", default="test", help="client id or 'test'")
    s.add_argument("--index", type=int, default=0)
    s.add_argument("--checkpoint", default=None, help="feature checkpoint (default: identity features)")
    s.add_argument("--tau", type=int, default=5)
    s.add_argument("--dump-trace", default=None)
    s.set_defaults(fn=_cmd_solve)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports and exits
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
