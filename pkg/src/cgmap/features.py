"""Location-free pilot features and synthetic sensor datasets.

Each sensor hears a pilot from every source; the feature for source m is the
center of mass of the binned cross-correlation between that pilot's multipath
profile and the reference source's profile. Sensors additionally carry a noisy
location estimate plus a scalar localization uncertainty.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .propagation import (
    Environment,
    ImpulseResponse,
    Point2,
    _dist_to_walls,
    channel_gain_db,
    trace_paths,
)

__all__ = [
    "DEFAULT_LAG_STEP",
    "SensorRecord",
    "PairSample",
    "DatasetConfig",
    "com_feature",
    "extract_feature_vector",
    "synth_localization",
    "generate_dataset",
    "write_records_csv",
    "read_records_csv",
    "write_pairs_csv",
    "read_pairs_csv",
]

DEFAULT_LAG_STEP = 1e-8  # seconds; ~3 m of path difference per bin


@dataclass
class SensorRecord:
    """One terminal: hidden true location plus what estimators may see."""

    true_location: Point2
    features: np.ndarray | None = None
    location_estimate: Point2 | None = None
    uncertainty: float | None = None

    def __post_init__(self):
        if self.features is not None:
            self.features = np.asarray(self.features, dtype=float)
            if self.features.ndim != 1:
                raise ValueError("features must be a 1-D vector")
        if self.uncertainty is not None and not self.uncertainty >= 0.0:
            raise ValueError("uncertainty must be >= 0")

    @property
    def has_complete_features(self) -> bool:
        return self.features is not None and bool(np.isfinite(self.features).all())

    @property
    def has_location(self) -> bool:
        return self.location_estimate is not None and self.uncertainty is not None


@dataclass(frozen=True)
class PairSample:
    """A measured link between two records of the same dataset.

    true_gain is simulation-only ground truth (like
    SensorRecord.true_location) kept for evaluation.
    """

    tx_index: int
    rx_index: int
    observed_gain: float
    error_pair: tuple
    true_gain: float = math.nan

    def __post_init__(self):
        if self.tx_index < 0 or self.rx_index < 0:
            raise ValueError("record indices must be non-negative")
        if self.tx_index == self.rx_index:
            raise ValueError("a pair must join two distinct records")
        e = tuple(float(v) for v in self.error_pair)
        if len(e) != 2 or e[0] < 0 or e[1] < 0:
            raise ValueError("error_pair must be two non-negative reals")
        object.__setattr__(self, "error_pair", e)

    def swapped(self) -> "PairSample":
        return PairSample(
            tx_index=self.rx_index,
            rx_index=self.tx_index,
            observed_gain=self.observed_gain,
            error_pair=(self.error_pair[1], self.error_pair[0]),
            true_gain=self.true_gain,
        )


def com_feature(h_m: ImpulseResponse, h_ref: ImpulseResponse, lag_step: float = DEFAULT_LAG_STEP) -> float:
    """Center of mass of the binned cross-correlation of two pilot profiles.

    Every amplitude product a_i * b_j lands in the lag bin nearest
    (tau_i - tau'_j); bin weights are the squared binned correlation. The
    result is the weighted mean bin center, in seconds.
    """
    if lag_step <= 0 or not math.isfinite(lag_step):
        raise ValueError("lag_step must be a positive real")
    if h_m.is_blocked or h_ref.is_blocked:
        raise ValueError("both impulse responses must contain at least one path")
    dm, am = h_m.delays(), h_m.amplitudes()
    dr, ar = h_ref.delays(), h_ref.amplitudes()
    lags = dm[:, None] - dr[None, :]
    prods = am[:, None] * ar[None, :]
    k = np.rint(lags / lag_step).astype(np.int64).ravel()
    kmin = int(k.min())
    r = np.bincount(k - kmin, weights=prods.ravel())
    weights = r * r
    total = weights.sum()
    if not total > 0.0:
        raise ValueError("degenerate pilot pair: correlation is identically zero")
    centers = (kmin + np.arange(r.size)) * lag_step
    return float((centers * weights).sum() / total)


def extract_feature_vector(env: Environment, loc: Point2, lag_step: float = DEFAULT_LAG_STEP) -> np.ndarray:
    """Feature vector of a sensor at loc: one CoM entry per source.

    A source whose link to loc is fully blocked yields NaN (missing
    feature). A blocked reference source leaves every entry missing.
    """
    m = env.source_count
    out = np.full(m, np.nan)
    h_ref = trace_paths(env, env.sources[env.reference_source_index], loc)
    if h_ref.is_blocked:
        return out
    for i in range(m):
        h_i = trace_paths(env, env.sources[i], loc)
        if h_i.is_blocked:
            continue
        out[i] = com_feature(h_i, h_ref, lag_step)
    return out


def synth_localization(
    true_loc: Point2, sigma_x: float, sigma_e: float, rng: np.random.Generator
) -> tuple:
    """Noisy location estimate plus reported uncertainty.

    The estimate adds isotropic Gaussian noise (std sigma_x per axis); the
    uncertainty is the realized displacement plus Gaussian noise (std
    sigma_e), clipped at zero. Draw order: two location offsets, then the
    uncertainty noise.
    """
    if sigma_x < 0 or sigma_e < 0:
        raise ValueError("noise scales must be >= 0")
    offset = rng.normal(0.0, sigma_x, size=2) if sigma_x > 0 else np.zeros(2)
    est = Point2(true_loc.x + float(offset[0]), true_loc.y + float(offset[1]))
    displacement = math.hypot(est.x - true_loc.x, est.y - true_loc.y)
    noise = float(rng.normal(0.0, sigma_e)) if sigma_e > 0 else 0.0
    return est, max(0.0, displacement + noise)


@dataclass
class DatasetConfig:
    pair_count: int
    environment: Environment
    sigma_x: float = 7.0
    sigma_e: float = 0.3
    sigma_c: float = 2.0
    rng_seed: int = 0
    terminal_count: int | None = None
    lag_step: float = DEFAULT_LAG_STEP

    def __post_init__(self):
        if self.pair_count < 1:
            raise ValueError("pair_count must be >= 1")
        if min(self.sigma_x, self.sigma_e, self.sigma_c) < 0:
            raise ValueError("noise scales must be >= 0")
        if self.rng_seed < 0:
            raise ValueError("rng_seed must be a non-negative integer")
        if self.terminal_count is not None and self.terminal_count < 2:
            raise ValueError("terminal_count must be >= 2")


def _draw_terminal(env: Environment, rng: np.random.Generator) -> Point2:
    b = env.region_bounds
    for _ in range(1000):
        p = Point2(float(rng.uniform(b.xmin, b.xmax)), float(rng.uniform(b.ymin, b.ymax)))
        arr = p.as_array()
        clear = all(
            float(np.hypot(*(arr - s.as_array()))) > 1e-6 for s in env.sources
        )
        if clear and _dist_to_walls(env, arr) > 1e-6:
            return p
    raise RuntimeError("could not place a terminal clear of walls and sources")


def generate_dataset(cfg: DatasetConfig) -> tuple:
    """Synthesize (records, pairs) for a scene.

    Terminals are uniform over the region; pairs are uniform over ordered
    distinct terminal indices. Observed gains add Gaussian noise (std
    sigma_c) to the ray-traced gain. RNG streams are split per purpose and
    per terminal so generation is reproducible and parallelizable.
    """
    env = cfg.environment
    n_terminals = cfg.terminal_count if cfg.terminal_count is not None else max(2, 2 * cfg.pair_count)

    rng_pos = np.random.default_rng(np.random.SeedSequence([cfg.rng_seed, 0]))
    records = []
    for t in range(n_terminals):
        true_loc = _draw_terminal(env, rng_pos)
        rng_t = np.random.default_rng(np.random.SeedSequence([cfg.rng_seed, 1, t]))
        est, err = synth_localization(true_loc, cfg.sigma_x, cfg.sigma_e, rng_t)
        feats = extract_feature_vector(env, true_loc, cfg.lag_step)
        records.append(
            SensorRecord(
                true_location=true_loc,
                features=feats,
                location_estimate=est,
                uncertainty=err,
            )
        )

    rng_pair = np.random.default_rng(np.random.SeedSequence([cfg.rng_seed, 2]))
    rng_noise = np.random.default_rng(np.random.SeedSequence([cfg.rng_seed, 3]))
    pairs = []
    attempts = 0
    max_attempts = 10_000 + 100 * cfg.pair_count
    while len(pairs) < cfg.pair_count:
        attempts += 1
        if attempts > max_attempts:
            raise RuntimeError("could not draw enough pairs with radio coverage")
        i = int(rng_pair.integers(n_terminals))
        j = int(rng_pair.integers(n_terminals - 1))
        if j >= i:
            j += 1
        c_true = channel_gain_db(env, records[i].true_location, records[j].true_location)
        if not math.isfinite(c_true):
            continue  # fully blocked link: resample
        obs = c_true + (float(rng_noise.normal(0.0, cfg.sigma_c)) if cfg.sigma_c > 0 else 0.0)
        pairs.append(
            PairSample(
                tx_index=i,
                rx_index=j,
                observed_gain=obs,
                error_pair=(records[i].uncertainty, records[j].uncertainty),
                true_gain=c_true,
            )
        )
    return records, pairs


# ---------------------------------------------------------------------------
# CSV schemas (documented in README)


def _fmt(value: float | None) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return ""
    return repr(float(value))


def write_records_csv(path, records) -> None:
    m = 0
    for r in records:
        if r.features is not None:
            m = max(m, r.features.size)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["id", "true_x", "true_y", "est_x", "est_y", "uncertainty"]
            + [f"phi_{i + 1}" for i in range(m)]
        )
        for idx, r in enumerate(records):
            est = r.location_estimate
            feats = [""] * m
            if r.features is not None:
                feats = [_fmt(v) for v in r.features]
            writer.writerow(
                [
                    idx,
                    _fmt(r.true_location.x),
                    _fmt(r.true_location.y),
                    _fmt(est.x) if est is not None else "",
                    _fmt(est.y) if est is not None else "",
                    _fmt(r.uncertainty),
                ]
                + feats
            )


def read_records_csv(path) -> list:
    records = []
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        m = sum(1 for h in header if h.startswith("phi_"))
        for row in reader:
            est = None
            if row[3] != "" and row[4] != "":
                est = Point2(float(row[3]), float(row[4]))
            feats = None
            if m:
                feats = np.array(
                    [float(v) if v != "" else math.nan for v in row[6 : 6 + m]], dtype=float
                )
            records.append(
                SensorRecord(
                    true_location=Point2(float(row[1]), float(row[2])),
                    features=feats,
                    location_estimate=est,
                    uncertainty=float(row[5]) if row[5] != "" else None,
                )
            )
    return records


def write_pairs_csv(path, pairs) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tx_id", "rx_id", "gain_obs_db", "err_tx", "err_rx", "gain_true_db"])
        for p in pairs:
            writer.writerow(
                [
                    p.tx_index,
                    p.rx_index,
                    _fmt(p.observed_gain),
                    _fmt(p.error_pair[0]),
                    _fmt(p.error_pair[1]),
                    _fmt(p.true_gain),
                ]
            )


def read_pairs_csv(path) -> list:
    pairs = []
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            pairs.append(
                PairSample(
                    tx_index=int(row[0]),
                    rx_index=int(row[1]),
                    observed_gain=float(row[2]),
                    error_pair=(float(row[3]), float(row[4])),
                    true_gain=float(row[5]) if len(row) > 5 and row[5] != "" else math.nan,
                )
            )
    return pairs
