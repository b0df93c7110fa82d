"""Ground-truth synthetic scenarios with known interventional behavior.

A scenario draws a pair of correlated discrete confounder labels (l, q), each
selecting a Gaussian component for its side's exogenous variable, then pushes
the exogenous draws through fixed random piecewise-affine maps:

    x = tau1(z_x),    y = beta * tau2(z_x) + tau3(z_y) + eps.

The confounder joint is built to hit a requested mutual information, with
uniform marginals held fixed so the interventional target does not depend on
the coupling strength. Because the generator is fully known, the scenario
carries an exact do-oracle: theta_star(x) = beta * tau2(tau1^{-1}(x)) +
E[tau3(z_y)], the last term by a fixed-seed Monte Carlo average (exact in the
identity-map case).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import CheckpointError, DataError, NumericalError

SCENARIO_FORMAT = "deconflow-scenario"
SCENARIO_VERSION = 1

# Generator constants: component variances for both exogenous sides and the
# additive output noise.
VAR_X = 0.01
VAR_Y = 0.01
VAR_EPS = 0.01

LEAKY_SLOPE = 0.2
CONTRACTION = 0.9


# ---------------------------------------------------------------------------
# confounder joint


@dataclass(frozen=True)
class ConfounderJoint:
    """Joint table over (l, q) plus its mixture-of-products factorization.

    The factorization exhibits the hidden-cause structure explicitly: a
    categorical h with weights ``h_weights`` and per-h conditionals
    ``l_given_h`` / ``q_given_h`` whose mixture reproduces ``table`` exactly.
    """

    table: np.ndarray          # (K_L, K_Q), entries >= 0, sums to 1
    h_weights: np.ndarray      # (K_H,)
    l_given_h: np.ndarray      # (K_H, K_L)
    q_given_h: np.ndarray      # (K_H, K_Q)

    @property
    def k_l(self) -> int:
        return self.table.shape[0]

    @property
    def k_q(self) -> int:
        return self.table.shape[1]

    def marginals(self) -> tuple[np.ndarray, np.ndarray]:
        return self.table.sum(axis=1), self.table.sum(axis=0)


def table_mutual_information(table: np.ndarray) -> float:
    """MI in nats of a joint probability table, with 0 log 0 = 0."""
    table = np.asarray(table, dtype=np.float64)
    pl = table.sum(axis=1, keepdims=True)
    pq = table.sum(axis=0, keepdims=True)
    mask = table > 0
    ratio = np.ones_like(table)
    np.divide(table, pl * pq, out=ratio, where=mask)
    return float(np.sum(table[mask] * np.log(ratio[mask])))


def _max_coupling(k_l: int, k_q: int, sigma: np.ndarray) -> np.ndarray:
    """Permutation-style coupling of uniform marginals with maximal MI.

    ``sigma`` maps each l to a preferred q. For k_l == k_q this is a permuted
    diagonal (MI = log k); otherwise a greedy transport between the uniform
    marginals that concentrates mass on the sigma-diagonal.
    """
    pl = np.full(k_l, 1.0 / k_l)
    pq = np.full(k_q, 1.0 / k_q)
    table = np.zeros((k_l, k_q))
    supply = pl.copy()
    demand = pq.copy()
    # first pass: matched cells; second pass: spill greedily
    for l in range(k_l):
        q = sigma[l] % k_q
        m = min(supply[l], demand[q])
        table[l, q] += m
        supply[l] -= m
        demand[q] -= m
    for l in range(k_l):
        for q in range(k_q):
            if supply[l] <= 0:
                break
            m = min(supply[l], demand[q])
            table[l, q] += m
            supply[l] -= m
            demand[q] -= m
    return table


def sample_confounder_joint(k_l: int, k_q: int, target_mi: float,
                            rng: np.random.Generator) -> ConfounderJoint:
    """Joint with uniform marginals whose MI is within 0.02 nats of target.

    Interpolates between the product table and a maximal coupling and solves
    the mixing weight by bisection; the marginals are identical along the
    whole path, so the Q-marginal (and with it every do-quantity of a
    scenario) does not depend on the requested coupling strength.
    """
    if k_l < 1 or k_q < 1:
        raise DataError("component counts must be positive")
    if target_mi < 0:
        raise DataError("target mutual information must be >= 0")
    pl = np.full(k_l, 1.0 / k_l)
    pq = np.full(k_q, 1.0 / k_q)
    product = np.outer(pl, pq)
    sigma = rng.permutation(max(k_l, k_q))
    coupled = _max_coupling(k_l, k_q, sigma)
    mi_max = table_mutual_information(coupled)
    if target_mi > mi_max + 1e-12:
        raise DataError(
            f"target MI {target_mi:.4f} exceeds the maximum {mi_max:.4f} reachable "
            f"for uniform marginals with K_L={k_l}, K_Q={k_q}")

    def mix(lam: float) -> np.ndarray:
        return (1.0 - lam) * product + lam * coupled

    if target_mi == 0.0:
        lam = 0.0
    else:
        lo, hi = 0.0, 1.0
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            if table_mutual_information(mix(mid)) < target_mi:
                lo = mid
            else:
                hi = mid
        lam = 0.5 * (lo + hi)
    table = mix(lam)
    if abs(table_mutual_information(table) - target_mi) > 0.02:
        raise NumericalError("bisection failed to reach the target MI")

    # mixture-of-products factorization: one product component plus one
    # deterministic component per populated cell of the coupling
    h_weights = [1.0 - lam]
    l_given_h = [pl]
    q_given_h = [pq]
    for l in range(k_l):
        for q in range(k_q):
            if coupled[l, q] > 0:
                h_weights.append(lam * coupled[l, q])
                l_given_h.append(np.eye(k_l)[l])
                q_given_h.append(np.eye(k_q)[q])
    return ConfounderJoint(table=table,
                           h_weights=np.array(h_weights),
                           l_given_h=np.array(l_given_h),
                           q_given_h=np.array(q_given_h))


# ---------------------------------------------------------------------------
# random invertible piecewise-affine maps


@dataclass
class ResidualPwaNet:
    """Linear in, five residual blocks, linear out; LeakyReLU activations.

    Each residual block adds g(v) = W2 leaky(W1 v + c1) + c2 to its input with
    the product of spectral norms of (W1, W2) scaled to CONTRACTION < 1, so
    every block is an invertible perturbation of the identity and the whole
    map is continuous piecewise affine. The output layer may change dimension
    (used for the scalar-valued effect map), in which case the net is not
    invertible and ``invert`` refuses.
    """

    w_in: np.ndarray
    b_in: np.ndarray
    blocks: list[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]]
    w_out: np.ndarray
    b_out: np.ndarray

    @property
    def in_dim(self) -> int:
        return self.w_in.shape[1]

    @property
    def out_dim(self) -> int:
        return self.w_out.shape[0]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        v = (x[None, :] if single else x) @ self.w_in.T + self.b_in
        for w1, c1, w2, c2 in self.blocks:
            h = v @ w1.T + c1
            h = np.where(h > 0, h, LEAKY_SLOPE * h)
            v = v + h @ w2.T + c2
        out = v @ self.w_out.T + self.b_out
        return out[0] if single else out

    def invert(self, y: np.ndarray, tol: float = 1e-12, max_iter: int = 500) -> np.ndarray:
        """Exact inverse: linear solves plus fixed-point per residual block."""
        if self.out_dim != self.in_dim:
            raise NumericalError("non-square map has no inverse")
        y = np.asarray(y, dtype=np.float64)
        single = y.ndim == 1
        v = np.linalg.solve(self.w_out, ((y[None, :] if single else y) - self.b_out).T).T
        for w1, c1, w2, c2 in reversed(self.blocks):
            target = v
            u = target.copy()
            for _ in range(max_iter):
                h = u @ w1.T + c1
                h = np.where(h > 0, h, LEAKY_SLOPE * h)
                nxt = target - (h @ w2.T + c2)
                if np.max(np.abs(nxt - u)) < tol:
                    u = nxt
                    break
                u = nxt
            else:
                raise NumericalError("residual-block inversion did not converge")
            v = u
        x = np.linalg.solve(self.w_in, (v - self.b_in).T).T
        return x[0] if single else x


def _spectral_norm(w: np.ndarray) -> float:
    return float(np.linalg.norm(w, 2))


def _random_layer(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    # 1x1 layers get magnitudes bounded away from zero: a product of two
    # near-zero Gaussian scalars would flatten the whole map and erase the
    # variable's influence, a degenerate benchmark
    if rows == 1 and cols == 1:
        return rng.choice([-1.0, 1.0]) * rng.uniform(0.5, 1.5, size=(1, 1))
    return rng.standard_normal((rows, cols)) / np.sqrt(cols)


def make_pwa_net(in_dim: int, out_dim: int, rng: np.random.Generator,
                 n_blocks: int = 5) -> ResidualPwaNet:
    width = in_dim
    w_in = _random_layer(width, in_dim, rng)
    b_in = 0.2 * rng.standard_normal(width)
    blocks = []
    for _ in range(n_blocks):
        w1 = rng.standard_normal((width, width)) / np.sqrt(width)
        w2 = rng.standard_normal((width, width)) / np.sqrt(width)
        prod = _spectral_norm(w1) * _spectral_norm(w2)
        adjust = np.sqrt(CONTRACTION / prod)
        blocks.append((w1 * adjust, 0.2 * rng.standard_normal(width),
                       w2 * adjust, 0.2 * rng.standard_normal(width)))
    w_out = _random_layer(out_dim, width, rng)
    b_out = 0.2 * rng.standard_normal(out_dim)
    return ResidualPwaNet(w_in, b_in, blocks, w_out, b_out)


def _validated_square_net(dim: int, rng: np.random.Generator,
                          probes: np.ndarray, max_tries: int = 20) -> ResidualPwaNet:
    """Regenerate until the round trip closes on the probe points."""
    for _ in range(max_tries):
        net = make_pwa_net(dim, dim, rng)
        y = net(probes)
        try:
            back = net.invert(y, tol=1e-12)
        except NumericalError:
            continue
        if np.max(np.abs(back - probes)) < 1e-8 and np.max(np.abs(net(back) - y)) < 1e-8:
            return net
    raise NumericalError("could not build an invertible piecewise-affine map "
                         f"in {max_tries} attempts")


# ---------------------------------------------------------------------------
# scenarios


@dataclass
class SimScenario:
    """Everything the generator and its do-oracle need, tied to one seed."""

    n: int
    joint: ConfounderJoint
    mu: np.ndarray             # (K_L, n) cause-side component means
    nu: np.ndarray             # (K_Q,) effect-side component means
    beta: float
    tau1: ResidualPwaNet | None   # None means identity maps (linear setting)
    tau2: ResidualPwaNet | None
    tau3: ResidualPwaNet | None
    seed: int
    target_mi: float
    var_x: float = VAR_X
    var_y: float = VAR_Y
    eps_var: float = VAR_EPS

    @property
    def identity_maps(self) -> bool:
        return self.tau1 is None

    def scenario_id(self) -> str:
        kind = "lin" if self.identity_maps else "pwa"
        return (f"{kind}-n{self.n}-kl{self.joint.k_l}-kq{self.joint.k_q}"
                f"-mi{self.target_mi:g}-b{self.beta:g}-s{self.seed}")


def make_scenario(n: int, k_l: int, k_q: int, beta: float, target_mi: float,
                  seed: int, identity_maps: bool = False) -> SimScenario:
    """Draw all ground-truth parameters for one scenario from one seed."""
    if n < 1:
        raise DataError("n must be >= 1")
    if identity_maps and n != 1:
        raise DataError("identity maps define a scalar cause; use n=1")
    rng = np.random.default_rng(seed)
    joint = sample_confounder_joint(k_l, k_q, target_mi, rng)
    mu = rng.uniform(1.0, 4.0, size=(k_l, n))
    nu = rng.uniform(0.0, 1.0, size=k_q)
    tau1 = tau2 = tau3 = None
    if not identity_maps:
        # probe points that cover the exogenous range generously
        probes = np.concatenate([
            mu[rng.integers(k_l, size=5000)] + np.sqrt(VAR_X) * rng.standard_normal((5000, n)),
            rng.uniform(-2.0, 7.0, size=(5000, n)),
        ])
        tau1 = _validated_square_net(n, rng, probes)
        tau2 = make_pwa_net(n, 1, rng)
        zy_probes = np.concatenate([
            nu[rng.integers(k_q, size=5000), None] + np.sqrt(VAR_Y) * rng.standard_normal((5000, 1)),
            rng.uniform(-2.0, 3.0, size=(5000, 1)),
        ])
        tau3 = _validated_square_net(1, rng, zy_probes)
    return SimScenario(n=n, joint=joint, mu=mu, nu=nu, beta=float(beta),
                       tau1=tau1, tau2=tau2, tau3=tau3, seed=int(seed),
                       target_mi=float(target_mi))


def simulate(scenario: SimScenario, count: int,
             rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Draw (data, latents, labels): observed rows, hidden (z_x, z_y), (l, q)."""
    if count < 1:
        raise DataError("count must be >= 1")
    s = scenario
    flat = rng.choice(s.joint.k_l * s.joint.k_q, size=count, p=s.joint.table.ravel())
    l = flat // s.joint.k_q
    q = flat % s.joint.k_q
    z_x = s.mu[l] + np.sqrt(s.var_x) * rng.standard_normal((count, s.n))
    z_y = s.nu[q] + np.sqrt(s.var_y) * rng.standard_normal(count)
    eps = np.sqrt(s.eps_var) * rng.standard_normal(count)
    if s.identity_maps:
        x = z_x
        y = s.beta * z_x[:, 0] + z_y + eps
    else:
        x = s.tau1(z_x)
        y = s.beta * s.tau2(z_x)[:, 0] + s.tau3(z_y[:, None])[:, 0] + eps
    data = np.column_stack([x, y])
    latents = np.column_stack([z_x, z_y])
    labels = np.column_stack([l, q])
    return data, latents, labels


def invert_tau1(scenario: SimScenario, x) -> np.ndarray:
    """Recover z_x from observed x; verified by re-application."""
    x = np.asarray(x, dtype=np.float64)
    if scenario.identity_maps:
        return x.copy()
    z = scenario.tau1.invert(x)
    if np.max(np.abs(scenario.tau1(z) - x)) > 1e-8:
        raise NumericalError("tau1 inversion residual exceeds 1e-8")
    return z


def expected_tau3(scenario: SimScenario, n_draws: int = 200_000,
                  seed: int = 1234) -> float:
    """E[tau3(Z_Y)] under the marginal mixture of the effect-side latent.

    Closed form for identity maps; otherwise a fixed-seed Monte Carlo average
    with at least 1e5 draws.
    """
    s = scenario
    p_q = s.joint.table.sum(axis=0)
    if s.identity_maps:
        return float(p_q @ s.nu)
    if n_draws < 100_000:
        raise DataError("use at least 1e5 draws for the oracle expectation")
    rng = np.random.default_rng(seed)
    q = rng.choice(s.joint.k_q, size=n_draws, p=p_q)
    z_y = s.nu[q] + np.sqrt(s.var_y) * rng.standard_normal(n_draws)
    return float(s.tau3(z_y[:, None])[:, 0].mean())


def theta_star(scenario: SimScenario, x, n_draws: int = 200_000,
               seed: int = 1234) -> np.ndarray | float:
    """Exact interventional expectation E[y | do(x)] of the generator.

    theta*(x) = beta * tau2(tau1^{-1}(x)) + E[tau3(Z_Y)]; the additive output
    noise has mean zero and drops out.
    """
    s = scenario
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    rows = x[None, :] if single else x
    if rows.shape[1] != s.n:
        raise DataError(f"query dimension {rows.shape[1]} != n = {s.n}")
    const = expected_tau3(s, n_draws=n_draws, seed=seed)
    z_x = invert_tau1(s, rows)
    if s.identity_maps:
        vals = s.beta * z_x[:, 0] + const
    else:
        vals = s.beta * s.tau2(z_x)[:, 0] + const
    return float(vals[0]) if single else vals


# ---------------------------------------------------------------------------
# scenario files


def _net_to_dict(net: ResidualPwaNet | None):
    if net is None:
        return None
    return {
        "w_in": net.w_in.tolist(), "b_in": net.b_in.tolist(),
        "blocks": [[w1.tolist(), c1.tolist(), w2.tolist(), c2.tolist()]
                   for w1, c1, w2, c2 in net.blocks],
        "w_out": net.w_out.tolist(), "b_out": net.b_out.tolist(),
    }


def _net_from_dict(d) -> ResidualPwaNet | None:
    if d is None:
        return None
    return ResidualPwaNet(
        w_in=np.array(d["w_in"]), b_in=np.array(d["b_in"]),
        blocks=[(np.array(w1), np.array(c1), np.array(w2), np.array(c2))
                for w1, c1, w2, c2 in d["blocks"]],
        w_out=np.array(d["w_out"]), b_out=np.array(d["b_out"]),
    )


def save_scenario(scenario: SimScenario, path) -> None:
    doc = {
        "format": SCENARIO_FORMAT,
        "schema_version": SCENARIO_VERSION,
        "n": scenario.n,
        "joint": {
            "table": scenario.joint.table.tolist(),
            "h_weights": scenario.joint.h_weights.tolist(),
            "l_given_h": scenario.joint.l_given_h.tolist(),
            "q_given_h": scenario.joint.q_given_h.tolist(),
        },
        "mu": scenario.mu.tolist(),
        "nu": scenario.nu.tolist(),
        "beta": scenario.beta,
        "tau1": _net_to_dict(scenario.tau1),
        "tau2": _net_to_dict(scenario.tau2),
        "tau3": _net_to_dict(scenario.tau3),
        "seed": scenario.seed,
        "target_mi": scenario.target_mi,
        "var_x": scenario.var_x,
        "var_y": scenario.var_y,
        "eps_var": scenario.eps_var,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_scenario(path) -> SimScenario:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt scenario file: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != SCENARIO_FORMAT:
        raise CheckpointError("not a scenario file")
    if doc.get("schema_version") != SCENARIO_VERSION:
        raise CheckpointError(
            f"unsupported scenario schema version {doc.get('schema_version')!r}")
    try:
        joint = ConfounderJoint(
            table=np.array(doc["joint"]["table"]),
            h_weights=np.array(doc["joint"]["h_weights"]),
            l_given_h=np.array(doc["joint"]["l_given_h"]),
            q_given_h=np.array(doc["joint"]["q_given_h"]),
        )
        return SimScenario(
            n=int(doc["n"]), joint=joint,
            mu=np.array(doc["mu"]), nu=np.array(doc["nu"]),
            beta=float(doc["beta"]),
            tau1=_net_from_dict(doc["tau1"]),
            tau2=_net_from_dict(doc["tau2"]),
            tau3=_net_from_dict(doc["tau3"]),
            seed=int(doc["seed"]), target_mi=float(doc["target_mi"]),
            var_x=float(doc["var_x"]), var_y=float(doc["var_y"]),
            eps_var=float(doc["eps_var"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed scenario file: {exc}") from exc
