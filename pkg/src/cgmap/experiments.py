"""Reproducible evaluation: NMSE sweeps over training-set size and gain-map
slice export.

Every random draw in a sweep comes from a seed derived as
SeedSequence([master_seed, train_pairs, realization, role]) with role
0 = training data, 1 = test data, 2 = cross-validation folds, so any cell
of the sweep can be recomputed independently (and in parallel) with
bit-identical results.
"""

from __future__ import annotations

import hashlib
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .features import DatasetConfig, SensorRecord, extract_feature_vector, generate_dataset
from .kernel_core import KernelExpert, kernel_matrix, krr_fit
from .propagation import (
    Environment,
    Point2,
    bundled_scene_path,
    channel_gain_db,
    environment_to_dict,
    load_scene,
    scene_from_dict,
)
from .trainer import (
    CvConfig,
    MoeHyperparams,
    MoEModel,
    TrainOptions,
    UnestimableQueryError,
    _pair_design,
    cv_grid_search,
    predict_cg,
    train_moe,
)

__all__ = [
    "ESTIMATOR_NAMES",
    "ExperimentConfig",
    "StandaloneExpert",
    "MoeEstimator",
    "MoeComponent",
    "fit_standalone",
    "fit_moe",
    "nmse_eval",
    "derive_seed",
    "resolve_scene",
    "run_nmse_sweep",
    "export_map_slices",
]

ESTIMATOR_NAMES = ("locb", "locf", "moe", "moe.locb", "moe.locf")

RESULTS_SCHEMA_VERSION = 1


def derive_seed(master_seed: int, train_pairs: int, realization: int, role: int) -> int:
    """Per-purpose dataset seed; role 0 = train, 1 = test, 2 = CV folds."""
    ss = np.random.SeedSequence([master_seed, train_pairs, realization, role])
    return int(ss.generate_state(1)[0])


def resolve_scene(scene: str) -> Environment:
    """Load a scene by filesystem path, or by bundled scene name."""
    p = Path(scene)
    if p.suffix == ".json" and p.exists():
        return load_scene(p)
    return load_scene(bundled_scene_path(f"{scene}.json" if not scene.endswith(".json") else scene))


@dataclass
class ExperimentConfig:
    scene: str = "desk60"
    train_sizes: list = field(default_factory=lambda: [1000])
    realizations: int = 10
    test_pairs: int = 2000
    master_seed: int = 0
    sigma_x: float = 7.0
    sigma_e: float = 0.3
    sigma_c: float = 2.0
    estimators: tuple = ESTIMATOR_NAMES
    jobs: int = 1

    def __post_init__(self):
        self.train_sizes = [int(v) for v in self.train_sizes]
        if not self.train_sizes or min(self.train_sizes) < 1:
            raise ValueError("train_sizes must hold positive pair counts")
        if self.realizations < 1 or self.test_pairs < 1:
            raise ValueError("realizations and test_pairs must be >= 1")
        self.estimators = tuple(self.estimators)
        for name in self.estimators:
            if name not in ESTIMATOR_NAMES:
                raise ValueError(f"unknown estimator {name!r}; choose from {ESTIMATOR_NAMES}")
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(doc) - known
        if extra:
            raise ValueError(f"unknown experiment config keys: {sorted(extra)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return {
            "scene": self.scene,
            "train_sizes": list(self.train_sizes),
            "realizations": self.realizations,
            "test_pairs": self.test_pairs,
            "master_seed": self.master_seed,
            "sigma_x": self.sigma_x,
            "sigma_e": self.sigma_e,
            "sigma_c": self.sigma_c,
            "estimators": list(self.estimators),
            "jobs": self.jobs,
        }


# ---------------------------------------------------------------------------
# estimators


class StandaloneExpert:
    """A single expert ridge-fit on the raw training pairs."""

    def __init__(self, kind: str, expert: KernelExpert):
        if kind not in ("locb", "locf"):
            raise ValueError("kind must be 'locb' or 'locf'")
        self.kind = kind
        self.expert = expert

    def predict(self, rec_t: SensorRecord, rec_r: SensorRecord) -> float:
        if self.kind == "locb":
            if not (rec_t.has_location and rec_r.has_location):
                raise UnestimableQueryError("location expert needs estimates on both records")
            q = np.array(
                [
                    rec_t.location_estimate.x,
                    rec_t.location_estimate.y,
                    rec_r.location_estimate.x,
                    rec_r.location_estimate.y,
                ]
            )
        else:
            if not (rec_t.has_complete_features and rec_r.has_complete_features):
                raise UnestimableQueryError("feature expert needs complete features on both records")
            q = np.concatenate([rec_t.features, rec_r.features])
        return self.expert.predict_one(q)


class MoeEstimator:
    def __init__(self, model: MoEModel):
        self.model = model

    def predict(self, rec_t: SensorRecord, rec_r: SensorRecord) -> float:
        return predict_cg(self.model, rec_t, rec_r)


class MoeComponent:
    """One expert of a trained mixture, evaluated without the gate."""

    def __init__(self, model: MoEModel, kind: str):
        if kind not in ("locb", "locf"):
            raise ValueError("kind must be 'locb' or 'locf'")
        self.model = model
        self.kind = kind

    def predict(self, rec_t: SensorRecord, rec_r: SensorRecord) -> float:
        if self.kind == "locb":
            if not (rec_t.has_location and rec_r.has_location):
                raise UnestimableQueryError("location expert needs estimates on both records")
            q = np.array(
                [
                    rec_t.location_estimate.x,
                    rec_t.location_estimate.y,
                    rec_r.location_estimate.x,
                    rec_r.location_estimate.y,
                ]
            )
            return self.model.expert_locb.predict_one(q)
        if not (rec_t.has_complete_features and rec_r.has_complete_features):
            raise UnestimableQueryError("feature expert needs complete features on both records")
        q = np.concatenate([rec_t.features, rec_r.features])
        return self.model.expert_locf.predict_one(q)


def fit_standalone(records, pairs, kind: str, cv: CvConfig) -> StandaloneExpert:
    """CV-tune then ridge-fit one expert on the raw pair list."""
    hp = cv_grid_search(records, pairs, kind, cv)
    x_l, x_p, complete, c, _ = _pair_design(records, pairs)
    if kind == "locb":
        x, y = x_l, c
    else:
        x, y = x_p[complete], c[complete]
    k = kernel_matrix(x, hp.kernel_width)
    alpha = krr_fit(k, y, ridge=y.size * hp.ridge_weight)
    return StandaloneExpert(kind, KernelExpert(x, alpha, hp))


def fit_moe(records, pairs, cv: CvConfig, options: TrainOptions | None = None) -> MoEModel:
    """CV-tune each expert, then run block-coordinate mixture training."""
    hp_l = cv_grid_search(records, pairs, "locb", cv)
    hp_p = cv_grid_search(records, pairs, "locf", cv)
    return train_moe(records, pairs, MoeHyperparams(locb=hp_l, locf=hp_p), options)


def nmse_eval(predict_fn, records, pairs, use_true_gain: bool = True) -> float:
    """Mean squared prediction error over the population variance of the
    targets (ddof = 0), so predicting the target mean scores exactly 1."""
    targets = np.array(
        [p.true_gain if use_true_gain else p.observed_gain for p in pairs], dtype=float
    )
    if not np.all(np.isfinite(targets)):
        raise ValueError("evaluation pairs must carry finite target gains")
    preds = np.array(
        [predict_fn(records[p.tx_index], records[p.rx_index]) for p in pairs], dtype=float
    )
    var = float(targets.var())
    if var <= 0.0:
        raise ValueError("target gains are constant; NMSE is undefined")
    err = preds - targets
    return float((err @ err) / err.size / var)


# ---------------------------------------------------------------------------
# sweep over training-set sizes


def _run_cell(args: tuple) -> dict:
    """One (train_pairs, realization) sweep cell; top-level for pickling."""
    scene_doc, cfg_doc, n_pairs, realization = args
    cfg = ExperimentConfig.from_dict(cfg_doc)
    env = scene_from_dict(scene_doc)
    seed_train = derive_seed(cfg.master_seed, n_pairs, realization, 0)
    seed_test = derive_seed(cfg.master_seed, n_pairs, realization, 1)
    seed_cv = derive_seed(cfg.master_seed, n_pairs, realization, 2)

    common = dict(
        environment=env, sigma_x=cfg.sigma_x, sigma_e=cfg.sigma_e, sigma_c=cfg.sigma_c
    )
    records, pairs = generate_dataset(DatasetConfig(pair_count=n_pairs, rng_seed=seed_train, **common))
    records_te, pairs_te = generate_dataset(
        DatasetConfig(pair_count=cfg.test_pairs, rng_seed=seed_test, **common)
    )
    cv = CvConfig(rng_seed=seed_cv)

    wanted = set(cfg.estimators)
    predictors = {}
    seconds = {}
    if "locb" in wanted:
        t0 = time.perf_counter()
        predictors["locb"] = fit_standalone(records, pairs, "locb", cv).predict
        seconds["locb"] = time.perf_counter() - t0
    if "locf" in wanted:
        t0 = time.perf_counter()
        predictors["locf"] = fit_standalone(records, pairs, "locf", cv).predict
        seconds["locf"] = time.perf_counter() - t0
    if wanted & {"moe", "moe.locb", "moe.locf"}:
        t0 = time.perf_counter()
        model = fit_moe(records, pairs, cv)
        seconds["moe"] = time.perf_counter() - t0
        if "moe" in wanted:
            predictors["moe"] = MoeEstimator(model).predict
        if "moe.locb" in wanted:
            predictors["moe.locb"] = MoeComponent(model, "locb").predict
        if "moe.locf" in wanted:
            predictors["moe.locf"] = MoeComponent(model, "locf").predict

    nmse = {
        name: nmse_eval(predictors[name], records_te, pairs_te)
        for name in cfg.estimators
    }
    return {
        "train_pairs": n_pairs,
        "realization": realization,
        "nmse": nmse,
        "seconds": seconds,
    }


def run_nmse_sweep(cfg: ExperimentConfig, out_dir, manifest_extra: dict | None = None) -> dict:
    """Run the full sweep; write results.csv and manifest.json under out_dir.

    results.csv holds one row per (train_pairs, realization, estimator)
    followed by aggregate rows whose realization column reads "mean" or
    "std" (population std). Floats are written with repr so a rerun with
    the same config is byte-identical. Timings live in the manifest only.
    manifest_extra entries are merged into the manifest document, letting a
    caller document the decision rule a sweep is run for.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    env = resolve_scene(cfg.scene)
    scene_doc = environment_to_dict(env)

    cells = [
        (scene_doc, cfg.to_dict(), n, r)
        for n in cfg.train_sizes
        for r in range(cfg.realizations)
    ]
    t_start = time.perf_counter()
    if cfg.jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            results = list(pool.map(_run_cell, cells))
    else:
        results = [_run_cell(c) for c in cells]
    elapsed = time.perf_counter() - t_start

    lines = ["train_pairs,realization,estimator,nmse"]
    for res in results:
        for name in cfg.estimators:
            lines.append(
                f"{res['train_pairs']},{res['realization']},{name},{res['nmse'][name]!r}"
            )
    summary = {}
    for n in cfg.train_sizes:
        for name in cfg.estimators:
            vals = np.array(
                [r["nmse"][name] for r in results if r["train_pairs"] == n], dtype=float
            )
            mean, std = float(vals.mean()), float(vals.std())
            summary[(n, name)] = (mean, std)
            lines.append(f"{n},mean,{name},{mean!r}")
            lines.append(f"{n},std,{name},{std!r}")
    (out_dir / "results.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")

    cfg_json = json.dumps(cfg.to_dict(), sort_keys=True)
    manifest = {
        "schema_version": RESULTS_SCHEMA_VERSION,
        "config": cfg.to_dict(),
        "config_sha256": hashlib.sha256(cfg_json.encode()).hexdigest(),
        "seed_rule": "SeedSequence([master_seed, train_pairs, realization, role]); role 0=train 1=test 2=cv",
        "elapsed_seconds": elapsed,
        "cell_seconds": [
            {"train_pairs": r["train_pairs"], "realization": r["realization"], **r["seconds"]}
            for r in results
        ],
        "summary": [
            {"train_pairs": n, "estimator": name, "nmse_mean": summary[(n, name)][0], "nmse_std": summary[(n, name)][1]}
            for n in cfg.train_sizes
            for name in cfg.estimators
        ],
    }
    if manifest_extra:
        manifest.update(manifest_extra)
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2) + "\n", encoding="utf-8"
    )
    return {"results": results, "summary": summary, "elapsed_seconds": elapsed}


# ---------------------------------------------------------------------------
# gain-map slices


def export_map_slices(
    env: Environment,
    predictors: dict,
    tx_points,
    grid_n: int,
    out_path,
    lag_step: float | None = None,
) -> int:
    """Predicted and true gain over a pixel grid, one CSV row per
    (transmitter, pixel).

    predictors maps estimator name to a predict(rec_t, rec_r) callable;
    prediction columns appear in dict order after gain_true_db. Pixels
    where a predictor cannot be evaluated (or that sit on scene geometry)
    leave the column empty. Returns the number of rows written.
    """
    from .features import DEFAULT_LAG_STEP

    step = DEFAULT_LAG_STEP if lag_step is None else lag_step
    b = env.region_bounds
    xs = np.linspace(b.xmin, b.xmax, grid_n)
    ys = np.linspace(b.ymin, b.ymax, grid_n)

    def record_at(p: Point2) -> SensorRecord:
        return SensorRecord(
            true_location=p,
            features=extract_feature_vector(env, p, step),
            location_estimate=p,
            uncertainty=0.0,
        )

    tx_records = []
    for t in tx_points:
        p = Point2(float(t[0]), float(t[1]))
        tx_records.append((p, record_at(p)))

    names = list(predictors)
    header = ["tx_x", "tx_y", "x", "y", "gain_true_db"] + [
        "pred_" + name.replace(".", "_") for name in names
    ]
    rows = [",".join(header)]
    for tx, tx_rec in tx_records:
        for y in ys:
            for x in xs:
                px = Point2(float(x), float(y))
                try:
                    true_db = channel_gain_db(env, tx, px)
                except ValueError:
                    continue  # pixel on a wall or on the transmitter
                cols = [repr(tx.x), repr(tx.y), repr(px.x), repr(px.y), repr(true_db)]
                rec = record_at(px)
                for name in names:
                    try:
                        cols.append(repr(float(predictors[name](tx_rec, rec))))
                    except (UnestimableQueryError, ValueError):
                        cols.append("")
                rows.append(",".join(cols))
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text("\n".join(rows) + "\n", encoding="utf-8")
    return len(rows) - 1
