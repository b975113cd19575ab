"""Mixture-of-experts training by block-coordinate minimization.

One sweep alternates (a) the closed-form joint fit of both experts at the
current gates with (b) the gating QP at the current expert predictions;
the data-fit objective is recorded after every half-step and must never
increase. Training always runs on the symmetric augmentation of the pair
list (each sample plus its argument-swapped twin), which together with
canonical error pairs makes the learned map symmetric in its arguments.

The default engine folds the augmentation instead of materializing it:
augmented system matrices are invariant under the twin permutation, so the
exact solution is twin-symmetric and solves an N-sized system with folded
kernels (K + K_swapped) and doubled gate-sum weights. `use_folded_solver=False`
runs the literal augmented system; tests hold the two routes together.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import pdist

from .features import PairSample, SensorRecord
from .gating import (
    GatingSolution,
    build_order_dag,
    canonical_error_pair,
    gating_interpolate,
    solve_gating_qp,
    transitive_reduction,
)
from .kernel_core import (
    DIAG_JITTER,
    ExpertHyperparams,
    KernelExpert,
    cross_kernel_matrix,
    joint_expert_solve,
    kernel_matrix,
)

__all__ = [
    "MoeHyperparams",
    "CvConfig",
    "TrainOptions",
    "MoEModel",
    "UnestimableQueryError",
    "augment_symmetric",
    "cv_grid_search",
    "eval_objective",
    "train_moe",
    "predict_cg",
    "model_to_dict",
    "model_from_dict",
    "save_model",
    "load_model",
]

MODEL_SCHEMA_VERSION = 1


class UnestimableQueryError(ValueError):
    """Neither modality is complete on both sides of a query."""


@dataclass(frozen=True)
class MoeHyperparams:
    locb: ExpertHyperparams
    locf: ExpertHyperparams


def _default_lambda_grid() -> np.ndarray:
    return np.geomspace(1e-6, 1e1, 8)


@dataclass
class CvConfig:
    fold_count: int = 5
    lambda_grid: np.ndarray = field(default_factory=_default_lambda_grid)
    sigma_grid: np.ndarray | None = None  # None: 8 log points around the median distance
    rng_seed: int = 0

    def __post_init__(self):
        self.lambda_grid = np.asarray(self.lambda_grid, dtype=float).ravel()
        if self.sigma_grid is not None:
            self.sigma_grid = np.asarray(self.sigma_grid, dtype=float).ravel()
            if self.sigma_grid.size == 0 or np.any(self.sigma_grid <= 0):
                raise ValueError("sigma_grid must hold positive widths")
        if self.fold_count < 2:
            raise ValueError("fold_count must be >= 2")
        if self.lambda_grid.size == 0 or np.any(self.lambda_grid <= 0):
            raise ValueError("lambda_grid must hold positive weights")


@dataclass
class TrainOptions:
    max_sweeps: int = 200
    rel_tol: float = 1e-6
    knn_k: int = 5
    freeze_gating: float | None = None
    use_folded_solver: bool = True
    qp_tol: float = 1e-6
    qp_max_iters: int = 50_000

    def __post_init__(self):
        if self.max_sweeps < 1:
            raise ValueError("max_sweeps must be >= 1")
        if self.freeze_gating is not None and not 0.0 <= self.freeze_gating <= 1.0:
            raise ValueError("freeze_gating must lie in [0, 1]")


def augment_symmetric(pairs) -> list:
    """Original samples followed by their argument-swapped twins."""
    pairs = list(pairs)
    return pairs + [p.swapped() for p in pairs]


def _pair_design(records, pairs):
    """Design arrays for a pair list: locations, features, gains, errors."""
    n = len(pairs)
    if n == 0:
        raise ValueError("at least one training pair is required")
    feat_dim = None
    for r in records:
        if r.features is not None:
            feat_dim = r.features.size
            break
    x_l = np.zeros((n, 4))
    x_p = np.full((n, 2 * feat_dim if feat_dim else 0), np.nan)
    complete = np.zeros(n, dtype=bool)
    c = np.zeros(n)
    err = np.zeros((n, 2))
    for k, p in enumerate(pairs):
        rt, rr = records[p.tx_index], records[p.rx_index]
        if not (rt.has_location and rr.has_location):
            raise ValueError("every training pair needs location estimates on both records")
        x_l[k] = (
            rt.location_estimate.x,
            rt.location_estimate.y,
            rr.location_estimate.x,
            rr.location_estimate.y,
        )
        if feat_dim and rt.has_complete_features and rr.has_complete_features:
            x_p[k, :feat_dim] = rt.features
            x_p[k, feat_dim:] = rr.features
            complete[k] = True
        c[k] = p.observed_gain
        err[k] = canonical_error_pair(p.error_pair)
    return x_l, x_p, complete, c, err


def cv_grid_search(records, pairs, expert_kind: str, cfg: CvConfig) -> ExpertHyperparams:
    """K-fold CV over a (lambda, sigma) grid for one standalone expert.

    Fits use the sample-size-normalized ridge objective, i.e. coefficients
    solve (K + n_train * lambda * I) a = y. Mean held-out squared error
    decides; exact ties go to the larger lambda, then the larger sigma.
    """
    x_l, x_p, complete, c, _ = _pair_design(records, pairs)
    if expert_kind == "locb":
        x, y = x_l, c
    elif expert_kind == "locf":
        x, y = x_p[complete], c[complete]
    else:
        raise ValueError("expert_kind must be 'locb' or 'locf'")
    n = y.size
    if n < cfg.fold_count:
        raise ValueError("fewer usable pairs than folds")

    perm = np.random.default_rng(cfg.rng_seed).permutation(n)
    fold_of = np.empty(n, dtype=int)
    fold_of[perm] = np.arange(n) % cfg.fold_count

    sigma_grid = cfg.sigma_grid
    if sigma_grid is None:
        d = pdist(x)
        d = d[d > 0]
        if d.size == 0:
            raise ValueError("degenerate inputs: all pairwise distances are zero")
        med = float(np.median(d))
        sigma_grid = np.geomspace(med / 10.0, med * 10.0, 8)

    lam_grid = cfg.lambda_grid
    mse = np.zeros((lam_grid.size, sigma_grid.size))
    for s_idx, sigma in enumerate(sigma_grid):
        k_full = kernel_matrix(x, float(sigma))
        for f in range(cfg.fold_count):
            te = fold_of == f
            tr = ~te
            n_tr = int(tr.sum())
            if n_tr == 0 or int(te.sum()) == 0:
                raise ValueError("a CV fold came out empty; reduce fold_count")
            w, v = np.linalg.eigh(k_full[np.ix_(tr, tr)])
            z = v.T @ y[tr]
            k_te = k_full[np.ix_(te, tr)]
            for l_idx, lam in enumerate(lam_grid):
                alpha = v @ (z / (w + n_tr * lam + DIAG_JITTER))
                resid = y[te] - k_te @ alpha
                mse[l_idx, s_idx] += float(resid @ resid)
    mse /= n

    best = (math.inf, None)
    for l_idx, lam in enumerate(lam_grid):
        for s_idx, sigma in enumerate(sigma_grid):
            if mse[l_idx, s_idx] <= best[0]:
                best = (mse[l_idx, s_idx], ExpertHyperparams(float(lam), float(sigma)))
    return best[1]


def eval_objective(c_obs, f_l, f_p, g, lambda_l, lambda_p, omega_l, omega_p) -> float:
    """Training objective at explicit function values and roughness terms."""
    c_obs = np.asarray(c_obs, dtype=float).ravel()
    f_l = np.asarray(f_l, dtype=float).ravel()
    f_p = np.asarray(f_p, dtype=float).ravel()
    g = np.asarray(g, dtype=float).ravel()
    resid = c_obs - g * f_l - (1.0 - g) * f_p
    return float(
        resid @ resid
        + lambda_l * g.sum() * omega_l
        + lambda_p * (1.0 - g).sum() * omega_p
    )


@dataclass
class MoEModel:
    expert_locb: KernelExpert
    expert_locf: KernelExpert
    gating: GatingSolution
    hyperparams: MoeHyperparams
    objective_trace: list
    converged: bool = True

    def predict_pair(self, rec_t: SensorRecord, rec_r: SensorRecord) -> float:
        return predict_cg(self, rec_t, rec_r)


def _swap_halves(x: np.ndarray) -> np.ndarray:
    half = x.shape[1] // 2
    return np.hstack([x[:, half:], x[:, :half]])


def _folded_kernel(x: np.ndarray, width: float) -> np.ndarray:
    """K + K_swapped over representatives; equals the augmented system fold."""
    k = kernel_matrix(x, width) + cross_kernel_matrix(x, _swap_halves(x), width)
    return 0.5 * (k + k.T)


def _zero_filled(k_sub: np.ndarray, idx: np.ndarray, n: int) -> np.ndarray:
    k = np.zeros((n, n))
    k[np.ix_(idx, idx)] = k_sub
    return k


def train_moe(records, pairs, hyperparams: MoeHyperparams, options: TrainOptions | None = None) -> MoEModel:
    """Block-coordinate training of the gated two-expert mixture.

    Pairs whose records lack complete features are pinned to gate 1 (pure
    location expert) and excluded from the feature kernel and the gating
    QP; at least one fully-featured pair is required. objective_trace[0]
    is the pre-optimization objective (zero coefficients), each later
    entry follows one half-step.
    """
    opts = options or TrainOptions()
    lam_l = hyperparams.locb.ridge_weight
    lam_p = hyperparams.locf.ridge_weight
    x_l, x_p, complete, c, err = _pair_design(records, pairs)
    if not complete.any():
        raise ValueError("no pair has complete features on both records; train a standalone location expert instead")

    if opts.use_folded_solver:
        n = c.size
        k_l = _folded_kernel(x_l, hyperparams.locb.kernel_width)
        idx = np.nonzero(complete)[0]
        k_p = _zero_filled(_folded_kernel(x_p[idx], hyperparams.locf.kernel_width), idx, n)
        lam_scale, omega_scale = 2.0, 2.0
        free = complete.copy()
        c_fit, err_fit = c, err
    else:
        aug = augment_symmetric(pairs)
        x_l_a, x_p_a, complete_a, c_a, err_a = _pair_design(records, aug)
        n = c_a.size
        k_l = kernel_matrix(x_l_a, hyperparams.locb.kernel_width)
        idx = np.nonzero(complete_a)[0]
        k_p = _zero_filled(kernel_matrix(x_p_a[idx], hyperparams.locf.kernel_width), idx, n)
        lam_scale, omega_scale = 1.0, 1.0
        free = complete_a.copy()
        c_fit, err_fit = c_a, err_a
        x_l, x_p = x_l_a, x_p_a  # expert inputs come from the augmented design

    def expand(vec: np.ndarray) -> np.ndarray:
        return np.concatenate([vec, vec]) if opts.use_folded_solver else vec

    free_idx = np.nonzero(free)[0]
    dag = transitive_reduction(build_order_dag(err_fit[free_idx]))

    g = np.ones(n)
    g[free_idx] = 0.5 if opts.freeze_gating is None else opts.freeze_gating

    def slack(v: float) -> float:
        return 1e-9 * max(1.0, abs(v))

    trace = [eval_objective(expand(c_fit), expand(np.zeros(n)), expand(np.zeros(n)), expand(g), lam_l, lam_p, 0.0, 0.0)]
    a_l = np.zeros(n)
    a_p = np.zeros(n)
    f_l = np.zeros(n)
    f_p = np.zeros(n)
    omega_l = omega_p = 0.0
    qp_state: dict = {}
    converged = False
    sweep_end_prev = trace[0]

    for sweep in range(opts.max_sweeps):
        a_l_new, a_p_new = joint_expert_solve(
            k_l, k_p, g, c_fit, lam_l * lam_scale, lam_p * lam_scale
        )
        f_l_new = k_l @ a_l_new
        f_p_new = k_p @ a_p_new
        omega_l_new = omega_scale * max(0.0, float(a_l_new @ f_l_new))
        omega_p_new = omega_scale * max(0.0, float(a_p_new @ f_p_new))
        obj = eval_objective(
            expand(c_fit), expand(f_l_new), expand(f_p_new), expand(g),
            lam_l, lam_p, omega_l_new, omega_p_new,
        )
        if obj <= trace[-1] + slack(trace[-1]):
            a_l, a_p = a_l_new, a_p_new
            f_l, f_p = f_l_new, f_p_new
            omega_l, omega_p = omega_l_new, omega_p_new
            trace.append(obj)
        else:
            # jitter-level regression: keep the previous iterate unchanged
            trace.append(trace[-1])

        if opts.freeze_gating is None and free_idx.size:
            coeff = lam_l * omega_l - lam_p * omega_p
            g_free = solve_gating_qp(
                f_l[free_idx], f_p[free_idx], c_fit[free_idx], coeff, dag,
                tol=opts.qp_tol, max_iters=opts.qp_max_iters, warm=qp_state,
            )
            g_cand = g.copy()
            g_cand[free_idx] = g_free
            obj_g = eval_objective(
                expand(c_fit), expand(f_l), expand(f_p), expand(g_cand),
                lam_l, lam_p, omega_l, omega_p,
            )
            if obj_g <= trace[-1] + slack(trace[-1]):
                g = g_cand
                trace.append(obj_g)
            else:
                trace.append(trace[-1])

        sweep_end = trace[-1]
        if opts.freeze_gating is not None:
            converged = True  # gates fixed: the joint solve is a fixed point
            break
        if sweep > 0 and abs(sweep_end_prev - sweep_end) <= opts.rel_tol * max(1.0, abs(sweep_end_prev)):
            converged = True
            break
        sweep_end_prev = sweep_end

    if opts.use_folded_solver:
        inputs_l = np.vstack([x_l, _swap_halves(x_l)])
        coeff_l = np.concatenate([a_l, a_l])
        inputs_p = np.vstack([x_p[idx], _swap_halves(x_p[idx])])
        coeff_p = np.concatenate([a_p[idx], a_p[idx]])
        paired = True
        gate_vals = np.concatenate([g[free_idx], g[free_idx]])
        gate_errs = np.vstack([err_fit[free_idx], err_fit[free_idx]])
    else:
        inputs_l = x_l
        coeff_l = a_l
        inputs_p = x_p[idx]
        coeff_p = a_p[idx]
        paired = False
        gate_vals = g[free_idx]
        gate_errs = err_fit[free_idx]

    model = MoEModel(
        expert_locb=KernelExpert(inputs_l, coeff_l, hyperparams.locb, paired_symmetric=paired),
        expert_locf=KernelExpert(inputs_p, coeff_p, hyperparams.locf, paired_symmetric=paired),
        gating=GatingSolution(g=gate_vals, error_pairs=gate_errs, knn_k=opts.knn_k),
        hyperparams=hyperparams,
        objective_trace=[float(v) for v in trace],
        converged=converged,
    )
    return model


def predict_cg(model: MoEModel, rec_t: SensorRecord, rec_r: SensorRecord) -> float:
    """Channel-gain prediction for a query pair of sensor records.

    Uses the gated mixture when both modalities are complete on both
    sides, otherwise falls back to the expert whose inputs survive. A pair
    with neither modality is unestimable.
    """
    locs_ok = rec_t.has_location and rec_r.has_location
    feats_ok = rec_t.has_complete_features and rec_r.has_complete_features
    if not locs_ok and not feats_ok:
        raise UnestimableQueryError("query needs locations or complete features on both records")
    f_l_val = None
    if locs_ok:
        q_l = np.array(
            [
                rec_t.location_estimate.x,
                rec_t.location_estimate.y,
                rec_r.location_estimate.x,
                rec_r.location_estimate.y,
            ]
        )
        f_l_val = model.expert_locb.predict_one(q_l)
        if not feats_ok:
            return f_l_val
    q_p = np.concatenate([rec_t.features, rec_r.features])
    f_p_val = model.expert_locf.predict_one(q_p)
    if not locs_ok:
        return f_p_val
    gate = gating_interpolate(model.gating, (rec_t.uncertainty, rec_r.uncertainty))
    return gate * f_l_val + (1.0 - gate) * f_p_val


# ---------------------------------------------------------------------------
# persistence (single JSON document, schema documented in README)


def _expert_to_dict(expert: KernelExpert) -> dict:
    return {
        "inputs": expert.inputs.tolist(),
        "coefficients": expert.coefficients.tolist(),
        "ridge_weight": expert.hyperparams.ridge_weight,
        "kernel_width": expert.hyperparams.kernel_width,
        "paired_symmetric": expert.paired_symmetric,
    }


def _expert_from_dict(doc: dict) -> KernelExpert:
    return KernelExpert(
        inputs=np.array(doc["inputs"], dtype=float),
        coefficients=np.array(doc["coefficients"], dtype=float),
        hyperparams=ExpertHyperparams(float(doc["ridge_weight"]), float(doc["kernel_width"])),
        paired_symmetric=bool(doc.get("paired_symmetric", False)),
    )


def model_to_dict(model: MoEModel, environment_fingerprint: str | None = None) -> dict:
    return {
        "schema_version": MODEL_SCHEMA_VERSION,
        "kind": "moe_channel_gain",
        "expert_locb": _expert_to_dict(model.expert_locb),
        "expert_locf": _expert_to_dict(model.expert_locf),
        "gating": {
            "g": model.gating.g.tolist(),
            "error_pairs": model.gating.error_pairs.tolist(),
            "knn_k": int(model.gating.knn_k),
            "r_max": float(model.gating.r_max),
        },
        "objective_trace": list(model.objective_trace),
        "converged": bool(model.converged),
        "environment_fingerprint": environment_fingerprint,
    }


def model_from_dict(doc: dict) -> MoEModel:
    if doc.get("schema_version") != MODEL_SCHEMA_VERSION:
        raise ValueError(f"unsupported model schema_version {doc.get('schema_version')!r}")
    locb = _expert_from_dict(doc["expert_locb"])
    locf = _expert_from_dict(doc["expert_locf"])
    gating = GatingSolution(
        g=np.array(doc["gating"]["g"], dtype=float),
        error_pairs=np.array(doc["gating"]["error_pairs"], dtype=float),
        knn_k=int(doc["gating"]["knn_k"]),
        r_max=float(doc["gating"]["r_max"]),
    )
    return MoEModel(
        expert_locb=locb,
        expert_locf=locf,
        gating=gating,
        hyperparams=MoeHyperparams(locb=locb.hyperparams, locf=locf.hyperparams),
        objective_trace=[float(v) for v in doc.get("objective_trace", [])],
        converged=bool(doc.get("converged", True)),
    )


def save_model(model: MoEModel, path, environment_fingerprint: str | None = None) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model, environment_fingerprint), fh)
        fh.write("\n")


def load_model(path) -> MoEModel:
    with open(path, "r", encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))
