"""Evaluation metrics and multi-seed experiment sweeps.

The headline metric compares interventional estimates against the generator's
exact do-oracle as a root-mean-square error over query points drawn from the
observed cause distribution. The baseline replaces the interventional
estimate with a kernel-regression estimate of the plain conditional
expectation, quantifying how much amplitude the confounding carries.
"""

from __future__ import annotations

import csv
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from .adjust import adjusted_slopes, controlled_slopes, do_expectations, naive_slopes
from .errors import DataError
from .simulate import SimScenario, make_scenario, simulate, table_mutual_information, theta_star
from .training import TrainConfig, fit


def mutual_information(table) -> float:
    """MI in nats of a discrete joint distribution table."""
    table = np.asarray(table, dtype=np.float64)
    if np.any(table < 0) or table.sum() <= 0:
        raise DataError("joint table must be nonnegative with positive mass")
    return table_mutual_information(table / table.sum())


def mutual_information_labels(l_labels, q_labels) -> float:
    """MI in nats of the empirical joint of two label sequences."""
    l_labels = np.asarray(l_labels).ravel()
    q_labels = np.asarray(q_labels).ravel()
    if len(l_labels) != len(q_labels) or len(l_labels) == 0:
        raise DataError("label sequences must be nonempty and equally long")
    _, li = np.unique(l_labels, return_inverse=True)
    _, qi = np.unique(q_labels, return_inverse=True)
    counts = np.zeros((li.max() + 1, qi.max() + 1))
    np.add.at(counts, (li, qi), 1.0)
    return mutual_information(counts)


def rmse_do(estimates, oracle, weights=None) -> float:
    """Root-mean-square gap between estimates and oracle values."""
    estimates = np.asarray(estimates, dtype=np.float64).ravel()
    oracle = np.asarray(oracle, dtype=np.float64).ravel()
    if estimates.shape != oracle.shape:
        raise DataError(f"length mismatch: {estimates.shape} vs {oracle.shape}")
    sq = (estimates - oracle) ** 2
    if weights is None:
        return float(np.sqrt(sq.mean()))
    weights = np.asarray(weights, dtype=np.float64).ravel()
    if weights.shape != sq.shape or np.any(weights < 0) or weights.sum() <= 0:
        raise DataError("weights must be nonnegative, matching, with positive mass")
    return float(np.sqrt((weights * sq).sum() / weights.sum()))


def silverman_bandwidth(x: np.ndarray) -> np.ndarray:
    """Per-coordinate rule-of-thumb bandwidth for Gaussian product kernels."""
    x = np.atleast_2d(x)
    n, d = x.shape
    factor = (4.0 / (d + 2.0)) ** (1.0 / (d + 4.0)) * n ** (-1.0 / (d + 4.0))
    return factor * x.std(axis=0, ddof=1)


def nadaraya_watson(x_train, y_train, x_query, bandwidth=None,
                    chunk: int = 512) -> tuple[np.ndarray, np.ndarray]:
    """Kernel-regression estimate of E[y|x] with its pointwise standard error.

    Gaussian product kernel; bandwidth defaults to Silverman's rule. The
    standard error uses the normalized kernel weights and local residuals.
    """
    x_train = np.atleast_2d(np.asarray(x_train, dtype=np.float64))
    y_train = np.asarray(y_train, dtype=np.float64).ravel()
    x_query = np.atleast_2d(np.asarray(x_query, dtype=np.float64))
    h = silverman_bandwidth(x_train) if bandwidth is None else \
        np.broadcast_to(np.asarray(bandwidth, dtype=np.float64), (x_train.shape[1],))
    if np.any(h <= 0):
        raise DataError("bandwidth must be strictly positive in every coordinate")

    est = np.empty(len(x_query))
    stderr = np.empty(len(x_query))
    xt = x_train / h
    for start in range(0, len(x_query), chunk):
        q = x_query[start:start + chunk] / h
        # log-weights per (query, train) pair, normalized stably per query
        d2 = ((q[:, None, :] - xt[None, :, :]) ** 2).sum(axis=2)
        logw = -0.5 * d2
        logw -= logw.max(axis=1, keepdims=True)
        w = np.exp(logw)
        w /= w.sum(axis=1, keepdims=True)
        m = w @ y_train
        resid2 = (y_train[None, :] - m[:, None]) ** 2
        var = (w * resid2).sum(axis=1) * (w * w).sum(axis=1) / np.maximum(
            1e-300, (w.sum(axis=1) ** 2))
        est[start:start + chunk] = m
        stderr[start:start + chunk] = np.sqrt(var)
    return est, stderr


def rmse_naive(data, oracle, bandwidth=None) -> float:
    """RMSE of the conditional-expectation estimate against the do-oracle.

    Uses Nadaraya-Watson at the observed rows: the error this leaves on the
    table is exactly what treating E[y|x] as a causal estimate costs.
    """
    data = np.asarray(data, dtype=np.float64)
    est, _ = nadaraya_watson(data[:, :-1], data[:, -1], data[:, :-1], bandwidth=bandwidth)
    return rmse_do(est, oracle)


# ---------------------------------------------------------------------------
# sweeps


@dataclass
class CellSpec:
    """One sweep cell: a scenario recipe plus the data/train seeds."""

    n: int
    k_l: int
    k_q: int
    beta: float
    target_mi: float
    scenario_seed: int
    data_seed: int
    n_samples: int
    identity_maps: bool = False

    def scenario_id(self) -> str:
        kind = "lin" if self.identity_maps else "pwa"
        return (f"{kind}-n{self.n}-kl{self.k_l}-kq{self.k_q}"
                f"-mi{self.target_mi:g}-b{self.beta:g}-s{self.scenario_seed}")


@dataclass
class EvalReport:
    scenario_id: str
    seed: int
    mi: float
    rmse: float
    rmse_naive: float
    beta_true: float
    beta_adjusted: float
    beta_naive: float
    beta_controlled: float
    nll: float
    runtime_s: float
    status: str
    config: str


LEDGER_COLUMNS = list(EvalReport.__dataclass_fields__)


def run_cell(cell: CellSpec, config: TrainConfig, n_draws: int = 1000) -> EvalReport:
    """simulate -> fit -> adjust -> score one cell. Deterministic per seeds."""
    from .flow import model_log_likelihood  # local import keeps workers light

    t0 = time.perf_counter()
    scenario = make_scenario(cell.n, cell.k_l, cell.k_q, cell.beta, cell.target_mi,
                             seed=cell.scenario_seed, identity_maps=cell.identity_maps)
    data, _, labels = simulate(scenario, cell.n_samples, np.random.default_rng(cell.data_seed))

    model, _ = fit(data, config)
    nll = float(-np.mean(model_log_likelihood(model, data)))

    ests = do_expectations(model, data, data[:, :cell.n], n_draws=n_draws,
                           rng=np.random.default_rng(cell.data_seed + 1))
    theta_hat = np.array([e.theta_hat for e in ests])
    oracle = theta_star(scenario, data[:, :cell.n])

    design = np.column_stack([np.ones(len(data)), data[:, :cell.n]])
    beta_adj = float(np.linalg.lstsq(design, theta_hat, rcond=None)[0][1]) \
        if cell.n == 1 else float("nan")
    beta_nv = float(naive_slopes(data)[0]) if cell.n == 1 else float("nan")
    combined = np.column_stack([data[:, :cell.n], labels, data[:, -1]])
    beta_ctl = float(controlled_slopes(
        combined, list(range(cell.n)), [cell.n, cell.n + 1])[0]) if cell.n == 1 else float("nan")

    return EvalReport(
        scenario_id=cell.scenario_id(),
        seed=cell.data_seed,
        mi=mutual_information(scenario.joint.table),
        rmse=rmse_do(theta_hat, oracle),
        rmse_naive=rmse_naive(data, oracle),
        beta_true=cell.beta,
        beta_adjusted=beta_adj,
        beta_naive=beta_nv,
        beta_controlled=beta_ctl,
        nll=nll,
        runtime_s=time.perf_counter() - t0,
        status="ok",
        config=f"K={config.n_components},layout={config.layout},blocks={config.n_blocks}",
    )


def _run_cell_guarded(args) -> EvalReport:
    cell, config, n_draws = args
    try:
        return run_cell(cell, config, n_draws=n_draws)
    except Exception as exc:  # per-cell failures are recorded, never fatal
        return EvalReport(scenario_id=cell.scenario_id(), seed=cell.data_seed,
                          mi=float("nan"), rmse=float("nan"), rmse_naive=float("nan"),
                          beta_true=cell.beta, beta_adjusted=float("nan"),
                          beta_naive=float("nan"), beta_controlled=float("nan"),
                          nll=float("nan"), runtime_s=0.0,
                          status=f"error: {exc}", config="")


def _ledger_keys(path) -> set[tuple[str, str]]:
    if not os.path.exists(path):
        return set()
    with open(path, newline="", encoding="utf-8") as fh:
        return {(row["scenario_id"], row["seed"]) for row in csv.DictReader(fh)}


def append_reports(path, reports: list[EvalReport]) -> int:
    """Append new (scenario_id, seed) rows to the ledger CSV; skip known keys."""
    known = _ledger_keys(path)
    fresh = [r for r in reports if (r.scenario_id, str(r.seed)) not in known]
    new_file = not os.path.exists(path)
    with open(path, "a", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=LEDGER_COLUMNS)
        if new_file:
            writer.writeheader()
        for r in fresh:
            writer.writerow(asdict(r))
    return len(fresh)


def run_sweep(cells: list[CellSpec], config: TrainConfig, ledger_path=None,
              workers: int = 1, n_draws: int = 1000) -> list[EvalReport]:
    """Run every cell (skipping ones already in the ledger), serially or not.

    Each cell owns its seeds, so results do not depend on scheduling; the
    ledger is appended once at the end through a single writer.
    """
    todo = cells
    if ledger_path is not None:
        known = _ledger_keys(ledger_path)
        todo = [c for c in cells if (c.scenario_id(), str(c.data_seed)) not in known]
    jobs = [(c, config, n_draws) for c in todo]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(_run_cell_guarded, jobs))
    else:
        reports = [_run_cell_guarded(j) for j in jobs]
    if ledger_path is not None:
        append_reports(ledger_path, reports)
    return reports
