"""Gaussian-mixture base distribution with diagonal covariances.

The mixture is parameterized for unconstrained gradient training: weights
through a softmax over logits, variances through exponentiated log-variances.
Both constraints (weights on the simplex, variances positive) hold by
construction for any parameter values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

LOG_2PI = float(np.log(2.0 * np.pi))

# Variances are clamped at this floor during training to stop components
# collapsing onto single points.
VARIANCE_FLOOR = 1e-4


@dataclass
class GmmParams:
    """Mixture weights (softmax of logits), means and diagonal log-variances."""

    logits: ad.Node     # (K,)
    means: ad.Node      # (K, d)
    log_vars: ad.Node   # (K, d)

    @property
    def n_components(self) -> int:
        return self.logits.value.shape[0]

    @property
    def dim(self) -> int:
        return self.means.value.shape[1]

    def parameters(self) -> list[ad.Node]:
        return [self.logits, self.means, self.log_vars]

    def weights(self) -> np.ndarray:
        v = self.logits.value
        e = np.exp(v - v.max())
        return e / e.sum()


def make_gmm(weights, means, variances) -> GmmParams:
    """Build parameters from plain arrays (weights must be positive)."""
    weights = np.asarray(weights, dtype=np.float64)
    means = np.atleast_2d(np.asarray(means, dtype=np.float64))
    variances = np.atleast_2d(np.asarray(variances, dtype=np.float64))
    if np.any(weights <= 0) or np.any(variances <= 0):
        raise ValueError("weights and variances must be strictly positive")
    return GmmParams(ad.leaf(np.log(weights / weights.sum())),
                     ad.leaf(means), ad.leaf(np.log(variances)))


def log_density_graph(params: GmmParams, z: ad.Node) -> ad.Node:
    """Tape node of per-row mixture log-density for a (N, d) batch."""
    if z.value.ndim != 2 or z.value.shape[1] != params.dim:
        raise ad.ShapeError(f"log_density: input {z.value.shape} vs dim {params.dim}")
    log_w = ad.add_scalar_node(params.logits, ad.neg(ad.logsumexp(params.logits)))
    cols = []
    for k in range(params.n_components):
        mu = ad.slice_row(params.means, k)
        lv = ad.slice_row(params.log_vars, k)
        diff = ad.sub_row(z, mu)
        quad = ad.sum(ad.mul_row(ad.mul(diff, diff), ad.exp(ad.neg(lv))), axis=1)
        log_norm = ad.mul_const(ad.sum(lv), -0.5)
        cols.append(ad.add_scalar_node(ad.mul_const(quad, -0.5), log_norm))
    comp = ad.add_row(ad.stack_cols(cols), log_w)
    return ad.add_const(ad.logsumexp(comp, axis=1), -0.5 * params.dim * LOG_2PI)


def gmm_log_density(params: GmmParams, z) -> np.ndarray | float:
    """log sum_k pi_k N(z; mu_k, diag var_k), stable via logsumexp."""
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    out = log_density_graph(params, ad.leaf(z[None, :] if single else z)).value
    return float(out[0]) if single else out


def gmm_sample(params: GmmParams, count: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``count`` i.i.d. rows: a component by weight, then a diagonal Gaussian."""
    if count < 1:
        raise ValueError("count must be >= 1")
    comps = rng.choice(params.n_components, size=count, p=params.weights())
    std = np.sqrt(np.exp(params.log_vars.value))
    return params.means.value[comps] + std[comps] * rng.standard_normal((count, params.dim))


def _kmeans_pp_seed(data: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [data[rng.integers(len(data))]]
    for _ in range(1, k):
        d2 = np.min([((data - c) ** 2).sum(axis=1) for c in centers], axis=0)
        total = d2.sum()
        if total <= 0:
            # all remaining mass on existing centers: pick any unused point
            centers.append(data[rng.integers(len(data))])
            continue
        centers.append(data[rng.choice(len(data), p=d2 / total)])
    return np.array(centers)


def gmm_init(data: np.ndarray, k: int, rng: np.random.Generator,
             max_lloyd_iters: int = 50) -> GmmParams:
    """Initialize from data: k-means++ seeding plus a few Lloyd iterations.

    Variances come from within-cluster scatter (floored), weights from cluster
    occupancy (floored at 1/(10K) and renormalized).
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2:
        raise ValueError("data must be a 2-d array")
    if k < 1:
        raise ValueError("k must be >= 1")
    if np.unique(data, axis=0).shape[0] < k:
        raise ValueError(f"need at least {k} distinct rows, got fewer")

    centers = _kmeans_pp_seed(data, k, rng)
    assign = np.zeros(len(data), dtype=np.intp)
    for _ in range(max_lloyd_iters):
        dists = ((data[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_assign = dists.argmin(axis=1)
        for j in range(k):
            sel = new_assign == j
            if sel.any():
                centers[j] = data[sel].mean(axis=0)
            else:
                # re-seed an emptied cluster at the farthest point
                centers[j] = data[dists.min(axis=1).argmax()]
        if np.array_equal(new_assign, assign):
            assign = new_assign
            break
        assign = new_assign

    counts = np.bincount(assign, minlength=k).astype(np.float64)
    weights = np.maximum(counts / len(data), 1.0 / (10.0 * k))
    weights /= weights.sum()
    variances = np.empty_like(centers)
    for j in range(k):
        sel = assign == j
        scatter = data[sel].var(axis=0) if sel.any() else np.zeros(data.shape[1])
        variances[j] = np.maximum(scatter, VARIANCE_FLOOR)
    return make_gmm(weights, centers, variances)
