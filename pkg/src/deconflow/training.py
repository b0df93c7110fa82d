"""Maximum-likelihood training of the flow and its mixture base.

Flow and base parameters are trained jointly by Adam on the exact
log-likelihood (no EM). Each fit standardizes the data per column, holds out a
validation split for early stopping, and runs several random restarts because
mixture likelihoods are multimodal; the restart with the best validation NLL
wins. Reported NLLs are per point and in original data units.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import CheckpointError, DataError, NumericalError
from .flow import (
    FlowBlock,
    FlowModel,
    LinearFlow,
    clone_model,
    init_model,
    inverse_graph,
    log_likelihood_graph,
)
from .gmm import VARIANCE_FLOOR, GmmParams, gmm_init

CHECKPOINT_FORMAT = "deconflow-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    n_components: int              # base mixture size K
    layout: str = "blocks"         # "blocks" or "linear"
    n_blocks: int = 6
    hidden: tuple[int, ...] = (64, 64)
    learning_rate: float = 1e-3
    batch_size: int = 128
    max_epochs: int = 500
    patience: int = 20
    clip_norm: float = 10.0
    val_fraction: float = 0.1
    restarts: int = 4
    seed: int = 0
    init_jitter: float = 0.02
    lr_drops: int = 2              # on plateau: reload best, lr /= 10, go again

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.n_components < 1 or self.n_blocks < 1 or self.restarts < 1:
            raise DataError("n_components, n_blocks and restarts must be positive")
        if not (0.0 < self.val_fraction <= 0.5):
            raise DataError("val_fraction must lie in (0, 0.5]")
        for name in ("learning_rate", "batch_size", "max_epochs", "patience", "clip_norm"):
            if getattr(self, name) <= 0:
                raise DataError(f"{name} must be positive")


@dataclass
class TrainLog:
    epochs: list[dict] = field(default_factory=list)        # restart, epoch, train/val nll
    restarts: list[dict] = field(default_factory=list)      # per-restart summary
    best_restart: int = -1
    config: dict = field(default_factory=dict)

    def best_val_curve(self, restart: int) -> list[float]:
        """Best-so-far validation NLL sequence for one restart (non-increasing)."""
        best, out = np.inf, []
        for row in self.epochs:
            if row["restart"] == restart:
                best = min(best, row["val_nll"])
                out.append(best)
        return out


class Adam:
    """Adaptive-moment ascent step on a list of parameter leaves."""

    def __init__(self, params: list[ad.Node], lr: float, clip_norm: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.clip_norm = clip_norm
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in params]
        self.v = [np.zeros_like(p.value) for p in params]

    def step(self) -> float:
        sq = 0.0
        for p in self.params:
            if p.grad is not None:
                sq += float((p.grad * p.grad).sum())
        norm = np.sqrt(sq)
        if not np.isfinite(norm):
            raise NumericalError("non-finite gradient norm")
        scale = 1.0 if norm <= self.clip_norm else self.clip_norm / norm
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad * scale
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            p.value -= self.lr * (self.m[i] / bc1) / (np.sqrt(self.v[i] / bc2) + self.eps)
        return norm


def _validate_data(data: np.ndarray, config: TrainConfig) -> np.ndarray:
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[1] < 2:
        raise DataError(f"data must be (N, n+1) with n >= 1, got {data.shape}")
    if not np.all(np.isfinite(data)):
        raise DataError("data contains non-finite entries")
    if data.shape[0] < 10 * config.n_components:
        raise DataError(
            f"need at least {10 * config.n_components} rows for K={config.n_components}, "
            f"got {data.shape[0]}")
    return data


def _mean_nll(model: FlowModel, rows_std: np.ndarray) -> float:
    ll = log_likelihood_graph(model, ad.leaf(rows_std)).value
    return float(-ll.mean())


def _snapshot(params: list[ad.Node]) -> list[np.ndarray]:
    return [p.value.copy() for p in params]


def _restore(params: list[ad.Node], snap: list[np.ndarray]) -> None:
    for p, s in zip(params, snap):
        p.value[...] = s


def fit(data: np.ndarray, config: TrainConfig,
        rng: np.random.Generator | None = None) -> tuple[FlowModel, TrainLog]:
    """Fit flow + base to (x_1..x_n, y) rows; returns best-validation model.

    The data is standardized internally; the fitted model stores the column
    shift/scale so its public interface stays in original units.
    """
    data = _validate_data(data, config)
    n = data.shape[1] - 1

    shift = data.mean(axis=0)
    scale = data.std(axis=0)
    if np.any(scale < 1e-12):
        raise DataError("a data column is (numerically) constant; cannot standardize")
    data_std = (data - shift) / scale
    log_scale_sum = float(np.log(scale).sum())

    root = np.random.SeedSequence(
        config.seed if rng is None else int(rng.integers(2**63)))
    split_rng, *restart_seeds = root.spawn(config.restarts + 1)
    perm = np.random.default_rng(split_rng).permutation(len(data_std))
    n_val = max(1, int(round(config.val_fraction * len(data_std))))
    val_rows = data_std[perm[:n_val]]
    train_rows = data_std[perm[n_val:]]

    log = TrainLog(config=asdict(config))
    best_model: FlowModel | None = None
    best_val = np.inf

    for r, seed in enumerate(restart_seeds):
        rng_r = np.random.default_rng(seed)
        try:
            model, val_nll, n_epochs = _fit_once(
                train_rows, val_rows, n, config, rng_r, log, r, log_scale_sum)
        except (ad.NonFiniteError, NumericalError, DataError) as exc:
            log.restarts.append({"restart": r, "status": f"failed: {exc}",
                                 "best_val_nll": np.inf, "epochs": 0})
            continue
        log.restarts.append({"restart": r, "status": "ok",
                             "best_val_nll": val_nll, "epochs": n_epochs})
        if val_nll < best_val:
            best_val = val_nll
            best_model = model
            log.best_restart = r

    if best_model is None:
        failures = "; ".join(row["status"] for row in log.restarts)
        raise NumericalError(f"all {config.restarts} restarts failed ({failures})")
    best_model.col_shift = shift
    best_model.col_scale = scale
    return best_model, log


def _warm_start_effect_path(model, train_rows, rng_r, restart):
    """Initialize the effect path at the least-squares fit of y on x.

    Starting the y-path at the plain regression puts the initial effect-side
    latent at the regression residual, which is far closer to the true latent
    than the raw y coordinate; cold starts reliably fall into basins that
    smuggle cause variation into z_Y. Restarts beyond the first jitter the
    warm start multiplicatively for diversity.
    """
    design = np.column_stack([np.ones(len(train_rows)), train_rows[:, :-1]])
    coef = np.linalg.lstsq(design, train_rows[:, -1], rcond=None)[0][1:]
    factor = 1.0 if restart == 0 else rng_r.uniform(0.6, 1.4)
    if model.is_linear:
        model.layout.a21.value[:] = coef * factor
    else:
        last = model.layout[-1]
        b = np.empty(model.n)
        b[last.perm] = coef * factor  # undo the block's output permutation
        last.b_row.value[:] = b


def _fit_once(train_rows, val_rows, n, config, rng_r, log, restart, log_scale_sum):
    model = init_model(n, config.n_components, layout=config.layout,
                       n_blocks=config.n_blocks, hidden=config.hidden,
                       rng=rng_r, jitter=config.init_jitter)
    _warm_start_effect_path(model, train_rows, rng_r, restart)
    # seed the base from the latent image of the data under the fresh flow
    z0, _ = inverse_graph(model, ad.leaf(train_rows))
    try:
        model.base = gmm_init(z0.value, config.n_components, rng_r)
    except ValueError as exc:
        raise DataError(str(exc)) from exc

    params = model.parameters()
    opt = Adam(params, config.learning_rate, config.clip_norm)
    floor = np.log(VARIANCE_FLOOR)

    best_snap = _snapshot(params)
    best_val = _mean_nll(model, val_rows) + log_scale_sum
    bad_epochs = 0
    drops_left = config.lr_drops
    epoch = 0
    batch = int(min(config.batch_size, len(train_rows)))
    for epoch in range(1, config.max_epochs + 1):
        order = rng_r.permutation(len(train_rows))
        total = 0.0
        for start in range(0, len(train_rows), batch):
            rows = train_rows[order[start:start + batch]]
            ll = log_likelihood_graph(model, ad.leaf(rows))
            loss = ad.mul_const(ad.sum(ll), -1.0 / len(rows))
            if not np.isfinite(loss.value):
                raise NumericalError("non-finite training loss")
            ad.backward(loss)
            opt.step()
            ad.reset_grads(params)
            np.clip(model.base.log_vars.value, floor, None,
                    out=model.base.log_vars.value)
            total += float(loss.value) * len(rows)
        train_nll = total / len(train_rows) + log_scale_sum
        val_nll = _mean_nll(model, val_rows) + log_scale_sum
        if not np.isfinite(val_nll):
            raise NumericalError("non-finite validation loss")
        log.epochs.append({"restart": restart, "epoch": epoch,
                           "train_nll": train_nll, "val_nll": val_nll})
        if val_nll < best_val - 1e-7:
            best_val = val_nll
            best_snap = _snapshot(params)
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= config.patience:
                if drops_left == 0:
                    break
                # restart from the best point with finer steps
                drops_left -= 1
                _restore(params, best_snap)
                opt = Adam(params, opt.lr * 0.1, config.clip_norm)
                bad_epochs = 0
    _restore(params, best_snap)
    return model, best_val, epoch


# ---------------------------------------------------------------------------
# checkpoints


def _mlp_to_dict(mlp: ad.MlpParams | None):
    if mlp is None:
        return None
    return {"weights": [w.value.tolist() for w in mlp.weights],
            "biases": [b.value.tolist() for b in mlp.biases]}


def _mlp_from_dict(d) -> ad.MlpParams | None:
    if d is None:
        return None
    return ad.MlpParams([ad.leaf(np.array(w)) for w in d["weights"]],
                        [ad.leaf(np.array(b)) for b in d["biases"]])


def model_to_dict(model: FlowModel, meta: dict | None = None) -> dict:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "schema_version": CHECKPOINT_VERSION,
        "n": model.n,
        "layout": "linear" if model.is_linear else "blocks",
        "col_shift": model.col_shift.tolist(),
        "col_scale": model.col_scale.tolist(),
        "base": {
            "logits": model.base.logits.value.tolist(),
            "means": model.base.means.value.tolist(),
            "log_vars": model.base.log_vars.value.tolist(),
        },
        "meta": meta or {},
    }
    if model.is_linear:
        lin = model.layout
        doc["linear"] = {
            "log_diag": lin.log_diag.value.tolist(),
            "diag_sign": lin.diag_sign.tolist(),
            "lower": lin.lower.value.tolist(),
            "a21": lin.a21.value.tolist(),
            "log_a22": float(lin.log_a22.value),
            "a22_sign": lin.a22_sign,
            "bias": lin.bias.value.tolist(),
        }
    else:
        doc["blocks"] = [{
            "split": b.split,
            "perm": b.perm.tolist(),
            "coupling": _mlp_to_dict(b.coupling),
            "log_diag": b.log_diag.value.tolist(),
            "diag_sign": b.diag_sign.tolist(),
            "b_row": b.b_row.value.tolist(),
            "log_bdd": float(b.log_bdd.value),
            "bdd_sign": b.bdd_sign,
            "bias": b.bias.value.tolist(),
        } for b in model.layout]
    return doc


def model_from_dict(doc: dict) -> FlowModel:
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError("not a checkpoint file")
    if doc.get("schema_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint schema version {doc.get('schema_version')!r}; "
            f"this build reads version {CHECKPOINT_VERSION}")
    try:
        n = int(doc["n"])
        base = GmmParams(ad.leaf(np.array(doc["base"]["logits"])),
                         ad.leaf(np.array(doc["base"]["means"])),
                         ad.leaf(np.array(doc["base"]["log_vars"])))
        if doc["layout"] == "linear":
            lin = doc["linear"]
            layout = LinearFlow(
                n=n,
                log_diag=ad.leaf(np.array(lin["log_diag"])),
                diag_sign=np.array(lin["diag_sign"]),
                lower=ad.leaf(np.array(lin["lower"])),
                a21=ad.leaf(np.array(lin["a21"])),
                log_a22=ad.leaf(np.asarray(lin["log_a22"])),
                a22_sign=float(lin["a22_sign"]),
                bias=ad.leaf(np.array(lin["bias"])),
            )
        else:
            layout = [FlowBlock(
                n=n,
                split=int(b["split"]),
                perm=np.array(b["perm"], dtype=np.intp),
                coupling=_mlp_from_dict(b["coupling"]),
                log_diag=ad.leaf(np.array(b["log_diag"])),
                diag_sign=np.array(b["diag_sign"]),
                b_row=ad.leaf(np.array(b["b_row"])),
                log_bdd=ad.leaf(np.asarray(b["log_bdd"])),
                bdd_sign=float(b["bdd_sign"]),
                bias=ad.leaf(np.array(b["bias"])),
            ) for b in doc["blocks"]]
        model = FlowModel(n=n, base=base, layout=layout,
                          col_shift=np.array(doc["col_shift"]),
                          col_scale=np.array(doc["col_scale"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc
    if model.base.dim != n + 1:
        raise CheckpointError(
            f"checkpoint dimension mismatch: base dim {model.base.dim} vs n+1 = {n + 1}")
    return model


def save_checkpoint(model: FlowModel, path, meta: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model, meta), fh)
        fh.write("\n")


def load_checkpoint(path) -> FlowModel:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt checkpoint file: {exc}") from exc
    if not isinstance(doc, dict):
        raise CheckpointError("corrupt checkpoint file: not an object")
    return model_from_dict(doc)
