"""Command-line interface.

Subcommands: scene validate, dataset generate, train, evaluate, sweep,
map-slices. Every command prints a JSON summary to stdout on success;
failures print a JSON error record to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .experiments import (
    ESTIMATOR_NAMES,
    ExperimentConfig,
    MoeComponent,
    MoeEstimator,
    export_map_slices,
    fit_moe,
    fit_standalone,
    nmse_eval,
    resolve_scene,
    run_nmse_sweep,
)
from .features import (
    DatasetConfig,
    generate_dataset,
    read_pairs_csv,
    read_records_csv,
    write_pairs_csv,
    write_records_csv,
)
from .trainer import CvConfig, TrainOptions, load_model, save_model


def _emit(doc: dict) -> None:
    json.dump(doc, sys.stdout, indent=2)
    sys.stdout.write("\n")


def cmd_scene_validate(args) -> int:
    env = resolve_scene(args.scene)
    _emit(
        {
            "scene": args.scene,
            "valid": True,
            "walls": len(env.walls),
            "sources": env.source_count,
            "reference_source_index": env.reference_source_index,
            "region": [
                env.region_bounds.xmin,
                env.region_bounds.ymin,
                env.region_bounds.xmax,
                env.region_bounds.ymax,
            ],
        }
    )
    return 0


def cmd_dataset_generate(args) -> int:
    env = resolve_scene(args.scene)
    cfg = DatasetConfig(
        pair_count=args.pairs,
        environment=env,
        sigma_x=args.sigma_x,
        sigma_e=args.sigma_e,
        sigma_c=args.sigma_c,
        rng_seed=args.seed,
        terminal_count=args.terminals,
    )
    records, pairs = generate_dataset(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_records_csv(out / "records.csv", records)
    write_pairs_csv(out / "pairs.csv", pairs)
    meta = {
        "scene": args.scene,
        "pair_count": args.pairs,
        "terminal_count": len(records),
        "sigma_x": args.sigma_x,
        "sigma_e": args.sigma_e,
        "sigma_c": args.sigma_c,
        "rng_seed": args.seed,
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    _emit({"records": str(out / "records.csv"), "pairs": str(out / "pairs.csv"), **meta})
    return 0


def cmd_train(args) -> int:
    records = read_records_csv(args.records)
    pairs = read_pairs_csv(args.pairs)
    cv = CvConfig(fold_count=args.folds, rng_seed=args.seed)
    opts = TrainOptions(
        max_sweeps=args.max_sweeps,
        freeze_gating=args.freeze_gating,
        use_folded_solver=not args.unfolded,
    )
    model = fit_moe(records, pairs, cv, opts)
    save_model(model, args.out)
    _emit(
        {
            "model": args.out,
            "pairs": len(pairs),
            "locb": {
                "ridge_weight": model.hyperparams.locb.ridge_weight,
                "kernel_width": model.hyperparams.locb.kernel_width,
            },
            "locf": {
                "ridge_weight": model.hyperparams.locf.ridge_weight,
                "kernel_width": model.hyperparams.locf.kernel_width,
            },
            "objective_first": model.objective_trace[0],
            "objective_last": model.objective_trace[-1],
            "half_steps": len(model.objective_trace) - 1,
            "converged": model.converged,
        }
    )
    return 0


def cmd_evaluate(args) -> int:
    model = load_model(args.model)
    records = read_records_csv(args.records)
    pairs = read_pairs_csv(args.pairs)
    use_true = not args.observed
    out = {
        "pairs": len(pairs),
        "target": "true_gain" if use_true else "observed_gain",
        "nmse": {
            "moe": nmse_eval(MoeEstimator(model).predict, records, pairs, use_true),
            "moe.locb": nmse_eval(MoeComponent(model, "locb").predict, records, pairs, use_true),
            "moe.locf": nmse_eval(MoeComponent(model, "locf").predict, records, pairs, use_true),
        },
    }
    _emit(out)
    return 0


def cmd_sweep(args) -> int:
    with open(args.config, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if args.jobs is not None:
        doc["jobs"] = args.jobs
    cfg = ExperimentConfig.from_dict(doc)
    res = run_nmse_sweep(cfg, args.out)
    _emit(
        {
            "out": args.out,
            "results": str(Path(args.out) / "results.csv"),
            "manifest": str(Path(args.out) / "manifest.json"),
            "elapsed_seconds": res["elapsed_seconds"],
            "summary": [
                {"train_pairs": n, "estimator": e, "nmse_mean": m, "nmse_std": s}
                for (n, e), (m, s) in sorted(res["summary"].items(), key=lambda kv: (kv[0][0], ESTIMATOR_NAMES.index(kv[0][1])))
            ],
        }
    )
    return 0


def cmd_map_slices(args) -> int:
    env = resolve_scene(args.scene)
    cfg = DatasetConfig(
        pair_count=args.pairs,
        environment=env,
        sigma_x=args.sigma_x,
        sigma_e=args.sigma_e,
        sigma_c=args.sigma_c,
        rng_seed=args.seed,
    )
    records, pairs = generate_dataset(cfg)
    cv = CvConfig(rng_seed=args.seed)
    locb = fit_standalone(records, pairs, "locb", cv)
    locf = fit_standalone(records, pairs, "locf", cv)
    model = fit_moe(records, pairs, cv)
    predictors = {
        "locb": locb.predict,
        "locf": locf.predict,
        "moe": MoeEstimator(model).predict,
        "moe.locb": MoeComponent(model, "locb").predict,
        "moe.locf": MoeComponent(model, "locf").predict,
    }
    if args.tx:
        tx_points = [tuple(float(v) for v in s.split(",")) for s in args.tx]
    else:
        tx_points = [(s.x, s.y) for s in env.sources]
    rows = export_map_slices(env, predictors, tx_points, args.grid, args.out)
    _emit({"out": args.out, "rows": rows, "transmitters": len(tx_points), "grid": args.grid})
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="cgmap",
        description="Channel-gain cartography: data synthesis, mixture training, evaluation.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    p_scene = sub.add_parser("scene", help="scene file operations")
    scene_sub = p_scene.add_subparsers(dest="scene_command", required=True)
    p_val = scene_sub.add_parser("validate", help="parse and sanity-check a scene")
    p_val.add_argument("--scene", required=True, help="scene JSON path or bundled name")
    p_val.set_defaults(func=cmd_scene_validate)

    p_data = sub.add_parser("dataset", help="dataset operations")
    data_sub = p_data.add_subparsers(dest="dataset_command", required=True)
    p_gen = data_sub.add_parser("generate", help="synthesize records.csv and pairs.csv")
    p_gen.add_argument("--scene", required=True)
    p_gen.add_argument("--pairs", type=int, required=True)
    p_gen.add_argument("--terminals", type=int, default=None)
    p_gen.add_argument("--sigma-x", type=float, default=7.0)
    p_gen.add_argument("--sigma-e", type=float, default=0.3)
    p_gen.add_argument("--sigma-c", type=float, default=2.0)
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--out", required=True, help="output directory")
    p_gen.set_defaults(func=cmd_dataset_generate)

    p_train = sub.add_parser("train", help="cross-validate and train the mixture")
    p_train.add_argument("--records", required=True)
    p_train.add_argument("--pairs", required=True)
    p_train.add_argument("--folds", type=int, default=5)
    p_train.add_argument("--max-sweeps", type=int, default=200)
    p_train.add_argument("--freeze-gating", type=float, default=None)
    p_train.add_argument("--unfolded", action="store_true", help="materialize the symmetric augmentation")
    p_train.add_argument("--seed", type=int, default=0)
    p_train.add_argument("--out", required=True, help="model JSON path")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("evaluate", help="NMSE of a trained model on a dataset")
    p_eval.add_argument("--model", required=True)
    p_eval.add_argument("--records", required=True)
    p_eval.add_argument("--pairs", required=True)
    p_eval.add_argument("--observed", action="store_true", help="score against observed gains")
    p_eval.set_defaults(func=cmd_evaluate)

    p_sweep = sub.add_parser("sweep", help="NMSE sweep over training-set sizes")
    p_sweep.add_argument("--config", required=True, help="experiment config JSON")
    p_sweep.add_argument("--jobs", type=int, default=None)
    p_sweep.add_argument("--out", required=True, help="output directory")
    p_sweep.set_defaults(func=cmd_sweep)

    p_map = sub.add_parser("map-slices", help="export per-pixel gain surfaces")
    p_map.add_argument("--scene", required=True)
    p_map.add_argument("--pairs", type=int, default=2000)
    p_map.add_argument("--grid", type=int, default=60)
    p_map.add_argument("--sigma-x", type=float, default=7.0)
    p_map.add_argument("--sigma-e", type=float, default=0.3)
    p_map.add_argument("--sigma-c", type=float, default=2.0)
    p_map.add_argument("--seed", type=int, default=0)
    p_map.add_argument("--tx", action="append", default=None, help='transmitter "x,y"; repeatable')
    p_map.add_argument("--out", required=True, help="output CSV path")
    p_map.set_defaults(func=cmd_map_slices)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # surface a machine-readable record
        json.dump(
            {"error": type(exc).__name__, "message": str(exc)},
            sys.stderr,
            indent=2,
        )
        sys.stderr.write("\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
