"""Interventional estimates by resampling the recovered effect-side latent.

The trained flow assigns each observed row a latent (z_X, z_Y). Because the
x-path of the flow ignores z_Y, the cause-side latent of any query point x is
well defined; holding it fixed while redrawing z_Y from its empirical pool
severs the dependence between the two latents and yields a Monte-Carlo
estimate of E[y | do(x)]. Regressing those estimates on the causes gives the
adjusted slope summary; plain and confounder-controlled least squares are
provided for comparison.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DataError, NumericalError
from .flow import FlowModel, model_forward, model_inverse

# two distinct effect values used to confirm at runtime that the recovered
# cause-side latent does not depend on the effect coordinate
_PROBE_GAP_TOL = 1e-8


@dataclass
class LatentSample:
    """Latent image of one observed row."""

    z_x: np.ndarray
    z_y: float
    row: int


@dataclass
class DoEstimate:
    """Monte-Carlo estimate of E[y | do(x)] at one query point."""

    x: np.ndarray
    theta_hat: float
    n_draws: int
    mc_stderr: float
    in_support: bool


def encode_dataset(model: FlowModel, data) -> list[LatentSample]:
    """Row-wise latent images of observed rows, preserving row order."""
    data = np.asarray(data, dtype=np.float64)
    z = model_inverse(model, data)
    return [LatentSample(z_x=z[i, :-1].copy(), z_y=float(z[i, -1]), row=i)
            for i in range(len(z))]


def _invert_causes(model: FlowModel, queries: np.ndarray, y_probes) -> np.ndarray:
    """Cause-side latent of query points, verified independent of the probe y."""
    z_a = model_inverse(model, np.column_stack([queries, np.full(len(queries), y_probes[0])]))
    z_b = model_inverse(model, np.column_stack([queries, np.full(len(queries), y_probes[1])]))
    gap = np.max(np.abs(z_a[:, :-1] - z_b[:, :-1]))
    if gap > _PROBE_GAP_TOL:
        raise NumericalError(
            f"cause-side latent depends on the effect coordinate (gap {gap:.3e}); "
            "the model violates the causal-order constraint")
    return z_a[:, :-1]


def _support_box(data_x: np.ndarray, queries: np.ndarray) -> np.ndarray:
    """Per-query flag: inside the coordinate-wise envelope of observed causes.

    The envelope is a bounding-box surrogate for the empirical support; exact
    for a one-dimensional cause.
    """
    lo = data_x.min(axis=0)
    hi = data_x.max(axis=0)
    return np.all((queries >= lo) & (queries <= hi), axis=1)


def do_expectations(model: FlowModel, data, queries, n_draws: int = 1000,
                    rng: np.random.Generator | None = None, replace: bool = True,
                    chunk_rows: int = 50_000) -> list[DoEstimate]:
    """Batch interventional estimates at many query points.

    For each query: fix its cause-side latent, draw ``n_draws`` effect-side
    latents from the empirical pool of the dataset (with replacement unless
    disabled), push each pair through the generative map, and average the
    effect coordinate. The Monte-Carlo standard error is the sample standard
    deviation of the draws over sqrt(n_draws).
    """
    if n_draws < 1:
        raise DataError("n_draws must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    data = np.asarray(data, dtype=np.float64)
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if data.ndim != 2 or data.shape[1] != model.dim:
        raise DataError(f"data must be (N, {model.dim}), got {data.shape}")
    if queries.shape[1] != model.n:
        raise DataError(f"queries must have {model.n} columns, got {queries.shape[1]}")

    pool = model_inverse(model, data)[:, -1]
    if not replace and n_draws > len(pool):
        raise DataError("without replacement, n_draws cannot exceed the pool size")

    y_lo, y_hi = np.quantile(data[:, -1], [0.25, 0.75])
    if y_hi <= y_lo:
        y_hi = y_lo + 1.0
    z_x = _invert_causes(model, queries, (y_lo, y_hi))

    in_support = _support_box(data[:, :-1], queries)
    if not np.all(in_support):
        warnings.warn(
            f"{int((~in_support).sum())} of {len(queries)} query points lie outside "
            "the empirical support of the causes; estimates there extrapolate",
            stacklevel=2)

    m = len(queries)
    if replace:
        draw_idx = rng.integers(0, len(pool), size=(m, n_draws))
    else:
        draw_idx = np.stack([rng.permutation(len(pool))[:n_draws] for _ in range(m)])

    theta = np.empty(m)
    stderr = np.empty(m)
    per_chunk = max(1, chunk_rows // n_draws)
    for start in range(0, m, per_chunk):
        stop = min(start + per_chunk, m)
        reps = stop - start
        zx_rep = np.repeat(z_x[start:stop], n_draws, axis=0)
        zy = pool[draw_idx[start:stop]].reshape(-1, 1)
        w = model_forward(model, np.column_stack([zx_rep, zy]))
        y = w[:, -1].reshape(reps, n_draws)
        theta[start:stop] = y.mean(axis=1)
        if n_draws > 1:
            stderr[start:stop] = y.std(axis=1, ddof=1) / np.sqrt(n_draws)
        else:
            stderr[start:stop] = np.inf
    return [DoEstimate(x=queries[i].copy(), theta_hat=float(theta[i]),
                       n_draws=n_draws, mc_stderr=float(stderr[i]),
                       in_support=bool(in_support[i]))
            for i in range(m)]


def do_expectation(model: FlowModel, data, x_query, n_draws: int = 1000,
                   rng: np.random.Generator | None = None,
                   replace: bool = True) -> DoEstimate:
    """Single-query convenience wrapper around :func:`do_expectations`."""
    return do_expectations(model, data, np.atleast_2d(x_query), n_draws=n_draws,
                           rng=rng, replace=replace)[0]


def _ols(design: np.ndarray, y: np.ndarray) -> np.ndarray:
    if np.linalg.matrix_rank(design) < design.shape[1]:
        raise DataError("rank-deficient design matrix")
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    return coef


def adjusted_slopes(model: FlowModel, data, cause_columns=None, n_draws: int = 1000,
                    rng: np.random.Generator | None = None,
                    queries=None) -> np.ndarray:
    """Least-squares slopes of the interventional estimates on the causes.

    Evaluates theta_hat at every observed row (or at explicit ``queries``)
    and regresses it on the selected cause columns with an intercept.
    """
    data = np.asarray(data, dtype=np.float64)
    causes = list(range(model.n)) if cause_columns is None else list(cause_columns)
    pts = data[:, :model.n] if queries is None else np.atleast_2d(queries)
    ests = do_expectations(model, data, pts, n_draws=n_draws, rng=rng)
    theta = np.array([e.theta_hat for e in ests])
    design = np.column_stack([np.ones(len(pts)), pts[:, causes]])
    return _ols(design, theta)[1:]


def _one_hot(col: np.ndarray) -> np.ndarray:
    """Indicator columns for each level beyond the first (reference dropped)."""
    levels = np.unique(col)
    return np.column_stack([(col == lv).astype(np.float64) for lv in levels[1:]]) \
        if len(levels) > 1 else np.empty((len(col), 0))


def naive_slopes(data, cause_columns=None) -> np.ndarray:
    """OLS slopes of the last column on the cause columns (with intercept)."""
    data = np.asarray(data, dtype=np.float64)
    causes = list(range(data.shape[1] - 1)) if cause_columns is None else list(cause_columns)
    y = data[:, -1]
    design = np.column_stack([np.ones(len(data)), data[:, causes]])
    return _ols(design, y)[1:]


def controlled_slopes(data, cause_columns, confounder_columns) -> np.ndarray:
    """OLS cause slopes controlling for discrete confounder columns.

    Confounder columns are treated as categorical and one-hot encoded with the
    reference level dropped; the returned vector covers the causes only.
    """
    data = np.asarray(data, dtype=np.float64)
    causes = list(cause_columns)
    y = data[:, -1]
    parts = [np.ones((len(data), 1)), data[:, causes]]
    for c in confounder_columns:
        parts.append(_one_hot(data[:, c]))
    design = np.column_stack(parts)
    return _ols(design, y)[1:1 + len(causes)]
