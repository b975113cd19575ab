"""2D radio propagation by image-method ray tracing.

Walls are line segments carrying a per-bounce reflection loss and a
per-crossing transmission loss (dB, ``inf`` blocks). A link's multipath
profile combines the direct ray with first- and second-order specular
reflections; path powers add incoherently, which keeps channel gains
real-valued and reciprocal.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

__all__ = [
    "SPEED_OF_LIGHT",
    "MIN_PATH_LENGTH",
    "NO_COVERAGE",
    "Point2",
    "Wall",
    "RegionBounds",
    "Environment",
    "ImpulseResponse",
    "trace_paths",
    "channel_gain_db",
    "power_sum_db",
    "scene_from_dict",
    "environment_to_dict",
    "load_scene",
    "save_scene",
    "bundled_scene_path",
]

SPEED_OF_LIGHT = 3.0e8
MIN_PATH_LENGTH = 0.1
NO_COVERAGE = float("-inf")

# Endpoints closer than this to a wall segment are rejected as degenerate.
_ON_WALL_TOL = 1e-9
# Intersections must fall strictly inside the propagation segment / the wall.
_T_EPS = 1e-9
_S_EPS = 1e-12


@dataclass(frozen=True)
class Point2:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError("point coordinates must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=float)

    @classmethod
    def from_array(cls, arr) -> "Point2":
        return cls(float(arr[0]), float(arr[1]))


@dataclass(frozen=True)
class Wall:
    endpoint_a: Point2
    endpoint_b: Point2
    reflection_loss: float = 0.0
    transmission_loss: float = 0.0

    def __post_init__(self):
        dx = self.endpoint_a.x - self.endpoint_b.x
        dy = self.endpoint_a.y - self.endpoint_b.y
        if math.hypot(dx, dy) <= _ON_WALL_TOL:
            raise ValueError("wall endpoints must be distinct")
        for name in ("reflection_loss", "transmission_loss"):
            v = getattr(self, name)
            if math.isnan(v) or v < 0.0:
                raise ValueError(f"{name} must be >= 0 (inf allowed)")


@dataclass(frozen=True)
class RegionBounds:
    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self):
        if not all(map(math.isfinite, (self.xmin, self.ymin, self.xmax, self.ymax))):
            raise ValueError("region bounds must be finite")
        if self.xmax <= self.xmin or self.ymax <= self.ymin:
            raise ValueError("region must have positive width and height")

    def contains(self, p: Point2) -> bool:
        return self.xmin <= p.x <= self.xmax and self.ymin <= p.y <= self.ymax


@dataclass(frozen=True)
class Environment:
    """Immutable scene: walls, pilot sources and propagation constants."""

    walls: tuple
    sources: tuple
    region_bounds: RegionBounds
    reference_source_index: int = 0
    reference_gain_db: float = -30.0
    pathloss_exponent: float = 2.0
    max_reflection_order: int = 2
    propagation_speed: float = SPEED_OF_LIGHT

    def __post_init__(self):
        object.__setattr__(self, "walls", tuple(self.walls))
        object.__setattr__(self, "sources", tuple(self.sources))
        if len(self.sources) < 2:
            raise ValueError("at least two pilot sources are required")
        if not 0 <= self.reference_source_index < len(self.sources):
            raise ValueError("reference_source_index out of range")
        for s in self.sources:
            if not self.region_bounds.contains(s):
                raise ValueError("every source must lie inside the region")
        if self.max_reflection_order != 2:
            raise ValueError("max_reflection_order is fixed at 2")
        if not (math.isfinite(self.pathloss_exponent) and self.pathloss_exponent > 0):
            raise ValueError("pathloss_exponent must be positive")
        if not (math.isfinite(self.propagation_speed) and self.propagation_speed > 0):
            raise ValueError("propagation_speed must be positive")
        if not math.isfinite(self.reference_gain_db):
            raise ValueError("reference_gain_db must be finite")
        # cached wall arrays for the vectorized tracer
        w = len(self.walls)
        wa = np.array([[wl.endpoint_a.x, wl.endpoint_a.y] for wl in self.walls], dtype=float)
        wb = np.array([[wl.endpoint_b.x, wl.endpoint_b.y] for wl in self.walls], dtype=float)
        object.__setattr__(self, "_wall_a", wa.reshape(w, 2))
        object.__setattr__(self, "_wall_b", wb.reshape(w, 2))
        object.__setattr__(
            self, "_wall_tloss", np.array([wl.transmission_loss for wl in self.walls], dtype=float)
        )
        object.__setattr__(
            self, "_wall_rloss", np.array([wl.reflection_loss for wl in self.walls], dtype=float)
        )

    @property
    def source_count(self) -> int:
        return len(self.sources)


@dataclass(frozen=True)
class ImpulseResponse:
    """Multipath profile: (delay_seconds, linear_amplitude) sorted by delay."""

    paths: tuple

    def __post_init__(self):
        object.__setattr__(self, "paths", tuple((float(d), float(a)) for d, a in self.paths))
        prev = -math.inf
        for d, a in self.paths:
            if d < prev:
                raise ValueError("paths must be sorted by delay")
            if d < 0 or a < 0 or not (math.isfinite(d) and math.isfinite(a)):
                raise ValueError("delays and amplitudes must be finite and non-negative")
            prev = d

    @property
    def is_blocked(self) -> bool:
        return len(self.paths) == 0

    def delays(self) -> np.ndarray:
        return np.array([d for d, _ in self.paths], dtype=float)

    def amplitudes(self) -> np.ndarray:
        return np.array([a for _, a in self.paths], dtype=float)


def _dist_to_walls(env: Environment, p: np.ndarray) -> float:
    """Smallest distance from p to any wall segment (inf when no walls)."""
    a = env._wall_a
    if a.shape[0] == 0:
        return math.inf
    b = env._wall_b
    e = b - a
    w = p[None, :] - a
    t = np.clip((w * e).sum(1) / (e * e).sum(1), 0.0, 1.0)
    closest = a + t[:, None] * e
    return float(np.sqrt(((closest - p[None, :]) ** 2).sum(1)).min())


def _segment_losses(env: Environment, starts, ends, excl) -> np.ndarray:
    """Summed transmission loss each segment picks up crossing non-excluded walls.

    starts/ends: (n, 2) segment endpoints; excl: (n, W) walls to ignore.
    A crossing requires the hit strictly inside the segment and on the wall
    (wall-endpoint grazes count; they are measure-zero anyway).
    """
    a = env._wall_a
    n = starts.shape[0]
    w = a.shape[0]
    if w == 0 or n == 0:
        return np.zeros(n)
    e = env._wall_b - a
    d = ends - starts
    ap = a[None, :, :] - starts[:, None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        denom = d[:, None, 0] * e[None, :, 1] - d[:, None, 1] * e[None, :, 0]
        t = (ap[:, :, 0] * e[None, :, 1] - ap[:, :, 1] * e[None, :, 0]) / denom
        s = (ap[:, :, 0] * d[:, None, 1] - ap[:, :, 1] * d[:, None, 0]) / denom
        crossed = (
            (np.abs(denom) > 0.0)
            & (t > _T_EPS)
            & (t < 1.0 - _T_EPS)
            & (s >= -_S_EPS)
            & (s <= 1.0 + _S_EPS)
            & ~excl
        )
    contrib = np.where(crossed, env._wall_tloss[None, :], 0.0)
    return contrib.sum(axis=1)


def _mirror_rows(points, a, e, ee):
    """Reflect points[i] across the line of wall i (arrays row-aligned)."""
    ap = points - a
    proj = a + ((ap * e).sum(1) / ee)[:, None] * e
    return 2.0 * proj - points


def _paired_intersection(starts, ends, a, e):
    """Per-row intersection of segment i with the line of wall i.

    Returns (t, s): parameters along the segment and along the wall.
    Rows with parallel geometry come back as nan.
    """
    d = ends - starts
    ap = a - starts
    with np.errstate(divide="ignore", invalid="ignore"):
        denom = d[:, 0] * e[:, 1] - d[:, 1] * e[:, 0]
        t = (ap[:, 0] * e[:, 1] - ap[:, 1] * e[:, 0]) / denom
        s = (ap[:, 0] * d[:, 1] - ap[:, 1] * d[:, 0]) / denom
    return t, s


def _path_candidates(env: Environment, pa: np.ndarray, pb: np.ndarray):
    """All geometric path candidates a->b up to two bounces.

    Returns (lengths, losses) for valid, finite-loss paths only.
    """
    w = env._wall_a.shape[0]
    direct_len = float(np.hypot(pb[0] - pa[0], pb[1] - pa[1]))
    if w == 0:
        return np.array([direct_len]), np.array([0.0])

    a = env._wall_a
    e = env._wall_b - a
    ee = (e * e).sum(1)
    rl = env._wall_rloss

    lengths = [np.array([direct_len])]
    losses = [
        _segment_losses(env, pa[None, :], pb[None, :], np.zeros((1, w), dtype=bool))
    ]

    # first order: mirror b across each wall, intersect a->image with that wall
    mirror_b = _mirror_rows(np.broadcast_to(pb, (w, 2)), a, e, ee)
    t1, s1 = _paired_intersection(np.broadcast_to(pa, (w, 2)), mirror_b, a, e)
    with np.errstate(invalid="ignore"):
        valid1 = (
            np.isfinite(t1)
            & (t1 > _T_EPS)
            & (t1 < 1.0 - _T_EPS)
            & (s1 > _S_EPS)
            & (s1 < 1.0 - _S_EPS)
        )
    refl = pa[None, :] + np.nan_to_num(t1, posinf=0.0, neginf=0.0)[:, None] * (mirror_b - pa[None, :])
    excl_self = np.zeros((w, w), dtype=bool)
    np.fill_diagonal(excl_self, True)
    leg_in = _segment_losses(env, np.broadcast_to(pa, (w, 2)), refl, excl_self)
    leg_out = _segment_losses(env, refl, np.broadcast_to(pb, (w, 2)), excl_self)
    len1 = np.sqrt(((refl - pa[None, :]) ** 2).sum(1)) + np.sqrt(
        ((pb[None, :] - refl) ** 2).sum(1)
    )
    loss1 = np.where(valid1, leg_in + leg_out + rl, np.inf)
    lengths.append(len1[valid1])
    losses.append(loss1[valid1])

    # second order: ordered wall pairs (i1 then i2), i1 != i2
    if w >= 2:
        i1, i2 = np.where(~np.eye(w, dtype=bool))
        c = i1.size
        b2 = mirror_b[i2]
        b21 = _mirror_rows(b2, a[i1], e[i1], ee[i1])
        ta, sa = _paired_intersection(np.broadcast_to(pa, (c, 2)), b21, a[i1], e[i1])
        with np.errstate(invalid="ignore"):
            ok_a = (
                np.isfinite(ta)
                & (ta > _T_EPS)
                & (ta < 1.0 - _T_EPS)
                & (sa > _S_EPS)
                & (sa < 1.0 - _S_EPS)
            )
        p1 = pa[None, :] + np.nan_to_num(ta, posinf=0.0, neginf=0.0)[:, None] * (b21 - pa[None, :])
        tb, sb = _paired_intersection(p1, b2, a[i2], e[i2])
        with np.errstate(invalid="ignore"):
            ok_b = (
                np.isfinite(tb)
                & (tb > _T_EPS)
                & (tb < 1.0 - _T_EPS)
                & (sb > _S_EPS)
                & (sb < 1.0 - _S_EPS)
            )
        valid2 = ok_a & ok_b
        p2 = p1 + np.nan_to_num(tb, posinf=0.0, neginf=0.0)[:, None] * (b2 - p1)
        excl_1 = np.zeros((c, w), dtype=bool)
        excl_1[np.arange(c), i1] = True
        excl_2 = np.zeros((c, w), dtype=bool)
        excl_2[np.arange(c), i2] = True
        leg1 = _segment_losses(env, np.broadcast_to(pa, (c, 2)), p1, excl_1)
        leg2 = _segment_losses(env, p1, p2, excl_1 | excl_2)
        leg3 = _segment_losses(env, p2, np.broadcast_to(pb, (c, 2)), excl_2)
        len2 = (
            np.sqrt(((p1 - pa[None, :]) ** 2).sum(1))
            + np.sqrt(((p2 - p1) ** 2).sum(1))
            + np.sqrt(((pb[None, :] - p2) ** 2).sum(1))
        )
        loss2 = np.where(valid2, leg1 + leg2 + leg3 + rl[i1] + rl[i2], np.inf)
        lengths.append(len2[valid2])
        losses.append(loss2[valid2])

    lengths = np.concatenate(lengths)
    losses = np.concatenate(losses)
    keep = np.isfinite(losses)
    return lengths[keep], losses[keep]


def trace_paths(env: Environment, a: Point2, b: Point2) -> ImpulseResponse:
    """Ray-trace the multipath profile between two points.

    Parameters
    ----------
    env : Environment
        Scene with walls and propagation constants.
    a, b : Point2
        Distinct endpoints inside the region, not lying on a wall segment.

    Returns
    -------
    ImpulseResponse
        Paths sorted by delay. Empty when every path crosses an
        infinite-loss wall (fully blocked link).
    """
    pa, pb = a.as_array(), b.as_array()
    if not env.region_bounds.contains(a) or not env.region_bounds.contains(b):
        raise ValueError("both endpoints must lie inside the region")
    if float(np.hypot(*(pb - pa))) <= _ON_WALL_TOL:
        raise ValueError("endpoints must be distinct")
    if _dist_to_walls(env, pa) <= _ON_WALL_TOL or _dist_to_walls(env, pb) <= _ON_WALL_TOL:
        raise ValueError("endpoints must not lie on a wall segment")

    lengths, losses = _path_candidates(env, pa, pb)
    if lengths.size == 0:
        return ImpulseResponse(())
    clamped = np.maximum(lengths, MIN_PATH_LENGTH)
    gain_db = env.reference_gain_db - 10.0 * env.pathloss_exponent * np.log10(clamped) - losses
    amps = 10.0 ** (gain_db / 20.0)
    delays = lengths / env.propagation_speed
    order = np.argsort(delays, kind="stable")
    return ImpulseResponse(tuple(zip(delays[order], amps[order])))


def power_sum_db(ir: ImpulseResponse) -> float:
    """Incoherent power sum of a profile, in dB. Blocked -> NO_COVERAGE."""
    if ir.is_blocked:
        return NO_COVERAGE
    return float(10.0 * np.log10((ir.amplitudes() ** 2).sum()))


def channel_gain_db(env: Environment, a: Point2, b: Point2) -> float:
    """Channel gain between two points: 10*log10 of summed path powers.

    Returns NO_COVERAGE (-inf) when the link is fully blocked by
    infinite-loss walls.
    """
    return power_sum_db(trace_paths(env, a, b))


# ---------------------------------------------------------------------------
# scene files (JSON, documented in README)

SCENE_SCHEMA_VERSION = 1


def _loss_value(raw) -> float:
    v = float(raw)
    return v


def scene_from_dict(doc: dict) -> Environment:
    """Build an Environment from a parsed scene document, validating as we go."""
    if not isinstance(doc, dict):
        raise ValueError("scene document must be a JSON object")
    version = doc.get("schema_version", SCENE_SCHEMA_VERSION)
    if version != SCENE_SCHEMA_VERSION:
        raise ValueError(f"unsupported scene schema_version {version!r}")
    try:
        region = doc["region"]
        bounds = RegionBounds(
            float(region["xmin"]), float(region["ymin"]),
            float(region["xmax"]), float(region["ymax"]),
        )
        sources = tuple(Point2(float(p[0]), float(p[1])) for p in doc["sources"])
        walls = tuple(
            Wall(
                Point2(float(wd["a"][0]), float(wd["a"][1])),
                Point2(float(wd["b"][0]), float(wd["b"][1])),
                reflection_loss=_loss_value(wd.get("reflection_loss_db", 0.0)),
                transmission_loss=_loss_value(wd.get("transmission_loss_db", 0.0)),
            )
            for wd in doc.get("walls", [])
        )
    except (KeyError, TypeError, IndexError) as exc:
        raise ValueError(f"malformed scene document: {exc!r}") from exc
    return Environment(
        walls=walls,
        sources=sources,
        region_bounds=bounds,
        reference_source_index=int(doc.get("reference_source_index", 0)),
        reference_gain_db=float(doc.get("reference_gain_db", -30.0)),
        pathloss_exponent=float(doc.get("pathloss_exponent", 2.0)),
        max_reflection_order=int(doc.get("max_reflection_order", 2)),
        propagation_speed=float(doc.get("propagation_speed", SPEED_OF_LIGHT)),
    )


def environment_to_dict(env: Environment) -> dict:
    return {
        "schema_version": SCENE_SCHEMA_VERSION,
        "region": {
            "xmin": env.region_bounds.xmin,
            "ymin": env.region_bounds.ymin,
            "xmax": env.region_bounds.xmax,
            "ymax": env.region_bounds.ymax,
        },
        "sources": [[s.x, s.y] for s in env.sources],
        "reference_source_index": env.reference_source_index,
        "walls": [
            {
                "a": [w.endpoint_a.x, w.endpoint_a.y],
                "b": [w.endpoint_b.x, w.endpoint_b.y],
                "reflection_loss_db": w.reflection_loss,
                "transmission_loss_db": w.transmission_loss,
            }
            for w in env.walls
        ],
        "reference_gain_db": env.reference_gain_db,
        "pathloss_exponent": env.pathloss_exponent,
        "max_reflection_order": env.max_reflection_order,
        "propagation_speed": env.propagation_speed,
    }


def load_scene(path) -> Environment:
    with open(path, "r", encoding="utf-8") as fh:
        return scene_from_dict(json.load(fh))


def save_scene(env: Environment, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(environment_to_dict(env), fh, indent=2)
        fh.write("\n")


def bundled_scene_path(name: str = "desk60.json") -> Path:
    """Filesystem path of a scene shipped with the package."""
    return Path(resources.files("cgmap").joinpath("scenes", name))
