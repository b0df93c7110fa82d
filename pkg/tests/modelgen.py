"""Random model constructors shared by flow, deconfounding and acceptance tests."""

import numpy as np

from deconflow import autodiff as ad
from deconflow.flow import FlowBlock, FlowModel, LinearFlow
from deconflow.gmm import GmmParams


def random_gmm(rng, k, d):
    w = rng.random(k) + 0.2
    return GmmParams(
        ad.leaf(np.log(w / w.sum())),
        ad.leaf(rng.standard_normal((k, d))),
        ad.leaf(np.log(rng.uniform(0.3, 2.0, size=(k, d)))),
    )


def random_block(rng, n, hidden=(8, 8), weight_scale=0.5):
    split = -(-n // 2)
    coupling = None
    if n >= 2:
        coupling = ad.init_mlp([split, *hidden, n - split], rng, weight_scale=weight_scale)
    perm = rng.permutation(n) if n > 1 else np.arange(1)
    return FlowBlock(
        n=n,
        split=split,
        perm=perm,
        coupling=coupling,
        log_diag=ad.leaf(rng.uniform(-0.4, 0.4, size=n)),
        diag_sign=rng.choice([-1.0, 1.0], size=n),
        b_row=ad.leaf(0.5 * rng.standard_normal(n)),
        log_bdd=ad.leaf(np.asarray(rng.uniform(-0.4, 0.4))),
        bdd_sign=float(rng.choice([-1.0, 1.0])),
        bias=ad.leaf(0.3 * rng.standard_normal(n + 1)),
    )


def random_linear(rng, n):
    return LinearFlow(
        n=n,
        log_diag=ad.leaf(rng.uniform(-0.4, 0.4, size=n)),
        diag_sign=rng.choice([-1.0, 1.0], size=n),
        lower=ad.leaf(0.5 * rng.standard_normal((n, n))),
        a21=ad.leaf(rng.standard_normal(n)),
        log_a22=ad.leaf(np.asarray(rng.uniform(-0.4, 0.4))),
        a22_sign=float(rng.choice([-1.0, 1.0])),
        bias=ad.leaf(0.3 * rng.standard_normal(n + 1)),
    )


def random_model(rng, n=None, depth=None, layout=None, k=None, hidden=(8, 8)):
    n = n if n is not None else int(rng.choice([1, 2, 5]))
    layout_kind = layout if layout is not None else ("linear" if rng.random() < 0.2 else "blocks")
    k = k if k is not None else int(rng.integers(1, 4))
    base = random_gmm(rng, k, n + 1)
    if layout_kind == "linear":
        lay = random_linear(rng, n)
    else:
        depth = depth if depth is not None else int(rng.integers(1, 4))
        lay = [random_block(rng, n, hidden=hidden) for _ in range(depth)]
    return FlowModel(n=n, base=base, layout=lay)
