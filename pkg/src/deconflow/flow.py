"""Causally-constrained normalizing flow between observed (x, y) and latents.

The latent vector is z = (z_X, z_Y) with z_X the first n coordinates and z_Y
the last one (the effect side is one-dimensional throughout). "Forward" means
the generative direction z -> w; the normalizing direction w -> z is the exact
analytic inverse. Every layer keeps the map block lower-triangular in the
causal order: the x-path never reads z_Y.

Two layouts are supported:

* a one-layer linear map w = A z + bias with A block lower-triangular, and
* a stack of transformation blocks, each one an additive coupling on z_X
  followed by a partly-diagonal causal matrix, a bias, and a permutation of
  the z_X coordinates only.

Invertible diagonal entries are parameterized as ``sign * exp(log_scale)``
with the sign frozen at construction, so log|det| is a sum of log-scales and
invertibility can never be lost during training.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .gmm import GmmParams, log_density_graph, make_gmm


@dataclass
class LinearFlow:
    """One-layer map w = A z + bias, A = [[a11, 0], [a21, a22]] lower block."""

    n: int
    log_diag: ad.Node        # (n,) log |diag a11|
    diag_sign: np.ndarray    # (n,) fixed +-1
    lower: ad.Node           # (n, n) free entries, masked strictly lower
    a21: ad.Node             # (n,)
    log_a22: ad.Node         # scalar log |a22|
    a22_sign: float
    bias: ad.Node            # (n+1,)

    def parameters(self) -> list[ad.Node]:
        return [self.log_diag, self.lower, self.a21, self.log_a22, self.bias]

    def a11_graph(self) -> ad.Node:
        mask = np.tril(np.ones((self.n, self.n)), k=-1)
        diag = ad.mul_const(ad.exp(self.log_diag), self.diag_sign)
        return ad.add(ad.diag_embed(diag), ad.mul_const(self.lower, mask))

    def a11(self) -> np.ndarray:
        return self.a11_graph().value

    def a22(self) -> float:
        return float(self.a22_sign * np.exp(self.log_a22.value))


@dataclass
class FlowBlock:
    """One transformation block in the generative direction.

    Applies, in order: additive coupling z_b += f_t(z_a) on the z_X half
    (skipped when n == 1, where z_b would be empty), the causal matrix
    B = [[diag(a), 0], [b, b_dd]], a learned bias, then a permutation of the
    z_X coordinates. The coupling and permutation are volume-preserving, so
    log|det| is just the sum of log |B_ii|.
    """

    n: int
    split: int               # z_a = z_X[:split], z_b = z_X[split:]
    perm: np.ndarray         # generative gather over z_X: out[j] = v[perm[j]]
    coupling: ad.MlpParams | None
    log_diag: ad.Node        # (n,)
    diag_sign: np.ndarray
    b_row: ad.Node           # (n,)
    log_bdd: ad.Node         # scalar
    bdd_sign: float
    bias: ad.Node            # (n+1,)

    def parameters(self) -> list[ad.Node]:
        out = [self.log_diag, self.b_row, self.log_bdd, self.bias]
        if self.coupling is not None:
            out.extend(self.coupling.parameters())
        return out


Layout = LinearFlow | list[FlowBlock]


@dataclass
class FlowModel:
    """Flow plus mixture base plus the per-column standardization of the data.

    ``col_shift``/``col_scale`` map user-facing coordinates to the internal
    standardized ones; they are fixed at fit time (identity by default) so all
    public entry points speak original units.
    """

    n: int
    base: GmmParams
    layout: Layout
    col_shift: np.ndarray = field(default=None)
    col_scale: np.ndarray = field(default=None)

    def __post_init__(self):
        d = self.n + 1
        if self.col_shift is None:
            self.col_shift = np.zeros(d)
        if self.col_scale is None:
            self.col_scale = np.ones(d)
        self.col_shift = np.asarray(self.col_shift, dtype=np.float64)
        self.col_scale = np.asarray(self.col_scale, dtype=np.float64)

    @property
    def dim(self) -> int:
        return self.n + 1

    @property
    def is_linear(self) -> bool:
        return isinstance(self.layout, LinearFlow)

    def blocks(self) -> list[FlowBlock]:
        if self.is_linear:
            raise TypeError("linear layout has no blocks")
        return self.layout

    def parameters(self) -> list[ad.Node]:
        out = self.base.parameters()
        if self.is_linear:
            out.extend(self.layout.parameters())
        else:
            for b in self.layout:
                out.extend(b.parameters())
        return out


# ---------------------------------------------------------------------------
# construction


def init_linear_flow(n: int, rng: np.random.Generator, jitter: float = 0.0) -> LinearFlow:
    """Near-identity linear layer; ``jitter`` perturbs the free entries."""
    return LinearFlow(
        n=n,
        log_diag=ad.leaf(jitter * rng.standard_normal(n)),
        diag_sign=np.ones(n),
        lower=ad.leaf(jitter * rng.standard_normal((n, n))),
        a21=ad.leaf(jitter * rng.standard_normal(n)),
        log_a22=ad.leaf(np.asarray(jitter * rng.standard_normal())),
        a22_sign=1.0,
        bias=ad.leaf(np.zeros(n + 1)),
    )


def init_flow_block(n: int, hidden: tuple[int, ...], rng: np.random.Generator,
                    rotate: int = 1, jitter: float = 0.0) -> FlowBlock:
    """Near-identity block whose permutation rotates z_X by ``rotate``.

    With n == 1 the z_X half cannot be split into two nonempty parts, so the
    coupling step is omitted and the block is just B, bias, and the trivial
    permutation.
    """
    split = -(-n // 2)  # ceil(n/2)
    coupling = None
    if n >= 2:
        sizes = [split, *hidden, n - split]
        # zero output layer: the block starts as the identity but the hidden
        # stack still carries gradient
        coupling = ad.init_mlp(sizes, rng, weight_scale=1.0, zero_last=True)
    perm = np.roll(np.arange(n), -rotate % n) if n > 1 else np.arange(1)
    return FlowBlock(
        n=n,
        split=split,
        perm=perm,
        coupling=coupling,
        log_diag=ad.leaf(jitter * rng.standard_normal(n)),
        diag_sign=np.ones(n),
        b_row=ad.leaf(jitter * rng.standard_normal(n)),
        log_bdd=ad.leaf(np.asarray(jitter * rng.standard_normal())),
        bdd_sign=1.0,
        bias=ad.leaf(np.zeros(n + 1)),
    )


def init_model(n: int, k: int, layout: str = "blocks", n_blocks: int = 6,
               hidden: tuple[int, ...] = (64, 64),
               rng: np.random.Generator | None = None,
               jitter: float = 0.0) -> FlowModel:
    """Fresh near-identity model with a K-component standard-normal-ish base."""
    rng = rng or np.random.default_rng(0)
    d = n + 1
    base = make_gmm(np.full(k, 1.0 / k),
                    0.1 * rng.standard_normal((k, d)),
                    np.ones((k, d)))
    if layout == "linear":
        lay: Layout = init_linear_flow(n, rng, jitter)
    elif layout == "blocks":
        lay = [init_flow_block(n, hidden, rng, rotate=1, jitter=jitter)
               for _ in range(n_blocks)]
    else:
        raise ValueError(f"unknown layout '{layout}'")
    return FlowModel(n=n, base=base, layout=lay)


# ---------------------------------------------------------------------------
# block and linear maps on the tape (standardized coordinates)


def _full_perm(block: FlowBlock) -> np.ndarray:
    return np.concatenate([block.perm, [block.n]])


def block_forward_graph(block: FlowBlock, z: ad.Node) -> tuple[ad.Node, ad.Node]:
    n, d = block.n, block.n + 1
    if z.value.ndim != 2 or z.value.shape[1] != d:
        raise ad.ShapeError(f"block_forward: input {z.value.shape}, expected (N, {d})")
    z_x = ad.slice_cols(z, 0, n)
    z_y = ad.slice_cols(z, n, d)
    if block.coupling is not None:
        z_a = ad.slice_cols(z_x, 0, block.split)
        z_b = ad.add(ad.slice_cols(z_x, block.split, n),
                     ad.forward_mlp(block.coupling, z_a))
        z_x = ad.concat_cols([z_a, z_b])
    diag = ad.mul_const(ad.exp(block.log_diag), block.diag_sign)
    bdd = ad.mul_const(ad.exp(block.log_bdd), block.bdd_sign)
    x = ad.mul_row(z_x, diag)
    y = ad.add(ad.stack_cols([ad.matmul(z_x, block.b_row)]),
               ad.mul_scalar_node(z_y, bdd))
    v = ad.add_row(ad.concat_cols([x, y]), block.bias)
    w = ad.gather_cols(v, _full_perm(block))
    logdet = ad.add(ad.sum(block.log_diag), block.log_bdd)
    return w, logdet


def block_inverse_graph(block: FlowBlock, w: ad.Node) -> tuple[ad.Node, ad.Node]:
    n, d = block.n, block.n + 1
    if w.value.ndim != 2 or w.value.shape[1] != d:
        raise ad.ShapeError(f"block_inverse: input {w.value.shape}, expected (N, {d})")
    v = ad.gather_cols(w, np.argsort(_full_perm(block)))
    v = ad.sub_row(v, block.bias)
    inv_diag = ad.mul_const(ad.exp(ad.neg(block.log_diag)), block.diag_sign)
    inv_bdd = ad.mul_const(ad.exp(ad.neg(block.log_bdd)), block.bdd_sign)
    z_x = ad.mul_row(ad.slice_cols(v, 0, n), inv_diag)
    z_y = ad.mul_scalar_node(
        ad.sub(ad.slice_cols(v, n, d), ad.stack_cols([ad.matmul(z_x, block.b_row)])),
        inv_bdd)
    if block.coupling is not None:
        z_a = ad.slice_cols(z_x, 0, block.split)
        z_b = ad.sub(ad.slice_cols(z_x, block.split, n),
                     ad.forward_mlp(block.coupling, z_a))
        z_x = ad.concat_cols([z_a, z_b])
    z = ad.concat_cols([z_x, z_y])
    logdet = ad.neg(ad.add(ad.sum(block.log_diag), block.log_bdd))
    return z, logdet


def linear_forward_graph(lin: LinearFlow, z: ad.Node) -> tuple[ad.Node, ad.Node]:
    n, d = lin.n, lin.n + 1
    if z.value.ndim != 2 or z.value.shape[1] != d:
        raise ad.ShapeError(f"linear_forward: input {z.value.shape}, expected (N, {d})")
    z_x = ad.slice_cols(z, 0, n)
    z_y = ad.slice_cols(z, n, d)
    a22 = ad.mul_const(ad.exp(lin.log_a22), lin.a22_sign)
    x = ad.matmul(z_x, ad.transpose(lin.a11_graph()))
    y = ad.add(ad.stack_cols([ad.matmul(z_x, lin.a21)]), ad.mul_scalar_node(z_y, a22))
    w = ad.add_row(ad.concat_cols([x, y]), lin.bias)
    logdet = ad.add(ad.sum(lin.log_diag), lin.log_a22)
    return w, logdet


def linear_inverse_graph(lin: LinearFlow, w: ad.Node) -> tuple[ad.Node, ad.Node]:
    n, d = lin.n, lin.n + 1
    if w.value.ndim != 2 or w.value.shape[1] != d:
        raise ad.ShapeError(f"linear_inverse: input {w.value.shape}, expected (N, {d})")
    v = ad.sub_row(w, lin.bias)
    inv_a22 = ad.mul_const(ad.exp(ad.neg(lin.log_a22)), lin.a22_sign)
    z_x = ad.solve_lower(lin.a11_graph(), ad.slice_cols(v, 0, n))
    z_y = ad.mul_scalar_node(
        ad.sub(ad.slice_cols(v, n, d), ad.stack_cols([ad.matmul(z_x, lin.a21)])),
        inv_a22)
    z = ad.concat_cols([z_x, z_y])
    logdet = ad.neg(ad.add(ad.sum(lin.log_diag), lin.log_a22))
    return z, logdet


def forward_graph(model: FlowModel, z: ad.Node) -> tuple[ad.Node, ad.Node]:
    """Generative pass in standardized coordinates, with total log|det J_T|."""
    if model.is_linear:
        return linear_forward_graph(model.layout, z)
    w, total = z, None
    for block in model.layout:
        w, ld = block_forward_graph(block, w)
        total = ld if total is None else ad.add(total, ld)
    if total is None:
        raise ValueError("empty block list")
    return w, total


def inverse_graph(model: FlowModel, w: ad.Node) -> tuple[ad.Node, ad.Node]:
    """Normalizing pass in standardized coordinates, with log|det J_{T^-1}|."""
    if model.is_linear:
        return linear_inverse_graph(model.layout, w)
    z, total = w, None
    for block in reversed(model.layout):
        z, ld = block_inverse_graph(block, z)
        total = ld if total is None else ad.add(total, ld)
    if total is None:
        raise ValueError("empty block list")
    return z, total


def log_likelihood_graph(model: FlowModel, w_std: ad.Node) -> ad.Node:
    """Per-row exact log-likelihood in standardized coordinates.

    log p(w) = log p_base(z0) + log|det J_{T^-1}(w)| with z0 the inverse image.
    """
    z, logdet = inverse_graph(model, w_std)
    return ad.add_scalar_node(log_density_graph(model.base, z), logdet)


# ---------------------------------------------------------------------------
# value-level API in original units


def _standardize(model: FlowModel, w: np.ndarray) -> np.ndarray:
    return (w - model.col_shift) / model.col_scale


def _destandardize(model: FlowModel, w_std: np.ndarray) -> np.ndarray:
    return w_std * model.col_scale + model.col_shift


def _rows(model: FlowModel, arr) -> tuple[np.ndarray, bool]:
    arr = np.asarray(arr, dtype=np.float64)
    single = arr.ndim == 1
    rows = arr[None, :] if single else arr
    if rows.ndim != 2 or rows.shape[1] != model.dim:
        raise ad.ShapeError(f"expected rows of width {model.dim}, got {arr.shape}")
    return rows, single


def model_forward(model: FlowModel, z) -> np.ndarray:
    """Generative map latent -> observation, in original units."""
    rows, single = _rows(model, z)
    w_std, _ = forward_graph(model, ad.leaf(rows))
    w = _destandardize(model, w_std.value)
    return w[0] if single else w


def model_inverse(model: FlowModel, w) -> np.ndarray:
    """Normalizing map observation -> latent, in original units."""
    rows, single = _rows(model, w)
    z, _ = inverse_graph(model, ad.leaf(_standardize(model, rows)))
    return z.value[0] if single else z.value


def model_log_likelihood(model: FlowModel, w) -> np.ndarray | float:
    """Exact log-density of observations in original units."""
    rows, single = _rows(model, w)
    ll = log_likelihood_graph(model, ad.leaf(_standardize(model, rows))).value
    ll = ll - np.log(model.col_scale).sum()
    return float(ll[0]) if single else ll


def extract_linear_slope(model: FlowModel) -> float:
    """Causal slope read off a fitted one-dimensional linear flow: a21 / a11.

    Rescaled by the stored per-column standardization so the value refers to
    original data units.
    """
    if not model.is_linear:
        raise TypeError("slope readout requires the linear layout")
    if model.n != 1:
        raise ValueError("slope readout requires a one-dimensional cause")
    lin = model.layout
    a11 = float(lin.diag_sign[0] * np.exp(lin.log_diag.value[0]))
    a21 = float(lin.a21.value[0])
    return float((a21 / a11) * (model.col_scale[1] / model.col_scale[0]))


# ---------------------------------------------------------------------------
# model surgery


def _copy_node(node: ad.Node) -> ad.Node:
    return ad.leaf(node.value.copy())


def _copy_mlp(mlp: ad.MlpParams | None) -> ad.MlpParams | None:
    if mlp is None:
        return None
    return ad.MlpParams([_copy_node(w) for w in mlp.weights],
                        [_copy_node(b) for b in mlp.biases])


def clone_model(model: FlowModel) -> FlowModel:
    """Deep copy with fresh parameter leaves (detached from any graph)."""
    base = GmmParams(_copy_node(model.base.logits), _copy_node(model.base.means),
                     _copy_node(model.base.log_vars))
    if model.is_linear:
        lin = model.layout
        lay: Layout = LinearFlow(lin.n, _copy_node(lin.log_diag), lin.diag_sign.copy(),
                                 _copy_node(lin.lower), _copy_node(lin.a21),
                                 _copy_node(lin.log_a22), lin.a22_sign,
                                 _copy_node(lin.bias))
    else:
        lay = [FlowBlock(b.n, b.split, b.perm.copy(), _copy_mlp(b.coupling),
                         _copy_node(b.log_diag), b.diag_sign.copy(),
                         _copy_node(b.b_row), _copy_node(b.log_bdd), b.bdd_sign,
                         _copy_node(b.bias))
               for b in model.layout]
    return FlowModel(n=model.n, base=base, layout=lay,
                     col_shift=model.col_shift.copy(), col_scale=model.col_scale.copy())


def reparameterize_effect_latent(model: FlowModel, scale: float, shift: float) -> FlowModel:
    """Equivalent model under z_Y' = scale * z_Y + shift.

    The base distribution of the effect-side latent is pushed through the
    affine map and its inverse is absorbed into the flow, leaving the
    observation distribution (and any do-quantity) unchanged. Used to probe
    that estimates are invariant to the affine ambiguity of the latent.
    """
    if scale == 0.0:
        raise ValueError("scale must be nonzero")
    out = clone_model(model)
    means = out.base.means.value
    log_vars = out.base.log_vars.value
    means[:, -1] = scale * means[:, -1] + shift
    log_vars[:, -1] = log_vars[:, -1] + 2.0 * np.log(abs(scale))
    if out.is_linear:
        lin = out.layout
        a22 = float(lin.a22_sign * np.exp(lin.log_a22.value))
        new_a22 = a22 / scale
        lin.log_a22.value[...] = np.log(abs(new_a22))
        lin.a22_sign = float(np.sign(new_a22))
        lin.bias.value[-1] -= new_a22 * shift
        return out
    n = out.n
    compensator = FlowBlock(
        n=n,
        split=-(-n // 2),
        perm=np.arange(n),
        coupling=None,
        log_diag=ad.leaf(np.zeros(n)),
        diag_sign=np.ones(n),
        b_row=ad.leaf(np.zeros(n)),
        log_bdd=ad.leaf(np.asarray(np.log(abs(1.0 / scale)))),
        bdd_sign=float(np.sign(1.0 / scale)),
        bias=ad.leaf(np.concatenate([np.zeros(n), [-shift / scale]])),
    )
    out.layout = [compensator, *out.layout]
    return out
