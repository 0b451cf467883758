"""Conditional masked autoregressive flow with exact density and analytic gradients.

Each block is a reverse permutation followed by a masked affine transform whose
shift/log-scale nets obey a strict autoregressive degree structure: output i
may depend only on inputs with degree < i, while the conditioning vector feeds
every hidden unit unmasked. The normalizing direction is a single network
pass; the generative direction inverts dimension-by-dimension.

Everything is numpy. Gradients are hand-written reverse-mode passes and are
validated against finite differences by `gradcheck`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import SamplingError, StateError, TrainingError, ValidationError

LOG_2PI = math.log(2.0 * math.pi)


def _autoregressive_masks(d: int, hidden_sizes: tuple[int, int],
                          ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Binary masks enforcing the degree structure.

    Input degrees are 1..d. Hidden degrees cycle over 0..d-2; degree-0 units
    carry only context/bias information, which is how the first output
    dimension stays conditioned on the observation. A hidden unit of degree m
    sees inputs with degree <= m; an output of degree i sees hidden units with
    degree < i.
    """
    if d < 2:
        raise ValidationError("autoregressive transform needs dimension >= 2")
    h1, h2 = hidden_sizes
    in_deg = np.arange(1, d + 1)
    deg1 = np.arange(h1) % (d - 1)
    deg2 = np.arange(h2) % (d - 1)
    out_deg = np.tile(in_deg, 2)  # shift block then log-scale block
    m1 = (deg1[:, None] >= in_deg[None, :]).astype(float)
    m2 = (deg2[:, None] >= deg1[None, :]).astype(float)
    m3 = (out_deg[:, None] > deg2[None, :]).astype(float)
    return m1, m2, m3


class MadeLayer:
    """Masked feed-forward net producing per-dimension shift and log-scale.

    Two tanh hidden layers; the context vector projects into both. The output
    layer starts at zero so a fresh layer is the identity transform.
    """

    def __init__(self, d: int, ctx_dim: int, hidden_sizes: tuple[int, int],
                 rng: np.random.Generator):
        self.d = d
        self.ctx_dim = ctx_dim
        self.hidden_sizes = tuple(hidden_sizes)
        h1, h2 = self.hidden_sizes
        self.M1, self.M2, self.M3 = _autoregressive_masks(d, self.hidden_sizes)
        s1 = 1.0 / math.sqrt(d + ctx_dim)
        s2 = 1.0 / math.sqrt(h1 + ctx_dim)
        self.W1 = rng.normal(0.0, s1, (h1, d))
        self.C1 = rng.normal(0.0, s1, (h1, ctx_dim))
        self.b1 = np.zeros(h1)
        self.W2 = rng.normal(0.0, s2, (h2, h1))
        self.C2 = rng.normal(0.0, s2, (h2, ctx_dim))
        self.b2 = np.zeros(h2)
        self.W3 = np.zeros((2 * d, h2))
        self.b3 = np.zeros(2 * d)

    PARAM_NAMES = ("W1", "C1", "b1", "W2", "C2", "b2", "W3", "b3")

    def params(self) -> list[np.ndarray]:
        return [getattr(self, n) for n in self.PARAM_NAMES]

    def set_params(self, arrays: list[np.ndarray]) -> None:
        for name, arr in zip(self.PARAM_NAMES, arrays):
            getattr(self, name)[...] = arr

    def context_projection(self, ctx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Precompute the context contributions, reused across sequential passes."""
        return ctx @ self.C1.T, ctx @ self.C2.T

    def forward(self, x: np.ndarray, ctx: np.ndarray,
                ctx_pre: tuple[np.ndarray, np.ndarray] | None = None):
        """One network pass: (mu, s, cache). x is (N, d), ctx is (N, ctx_dim)."""
        if ctx_pre is None:
            ctx_pre = self.context_projection(ctx)
        a1 = x @ (self.W1 * self.M1).T + ctx_pre[0] + self.b1
        h1v = np.tanh(a1)
        a2 = h1v @ (self.W2 * self.M2).T + ctx_pre[1] + self.b2
        h2v = np.tanh(a2)
        out = h2v @ (self.W3 * self.M3).T + self.b3
        mu, s = out[:, :self.d], out[:, self.d:]
        cache = (x, ctx, h1v, h2v)
        return mu, s, cache

    def backward(self, cache, dmu: np.ndarray, ds: np.ndarray):
        """Reverse-mode pass. Returns parameter gradients (same order as
        `params()`) and the gradient with respect to the layer input."""
        x, ctx, h1v, h2v = cache
        dout = np.concatenate([dmu, ds], axis=1)
        w3m = self.W3 * self.M3
        gW3 = (dout.T @ h2v) * self.M3
        gb3 = dout.sum(axis=0)
        dh2 = dout @ w3m
        da2 = dh2 * (1.0 - h2v ** 2)
        w2m = self.W2 * self.M2
        gW2 = (da2.T @ h1v) * self.M2
        gC2 = da2.T @ ctx
        gb2 = da2.sum(axis=0)
        dh1 = da2 @ w2m
        da1 = dh1 * (1.0 - h1v ** 2)
        w1m = self.W1 * self.M1
        gW1 = (da1.T @ x) * self.M1
        gC1 = da1.T @ ctx
        gb1 = da1.sum(axis=0)
        dx = da1 @ w1m
        return [gW1, gC1, gb1, gW2, gC2, gb2, gW3, gb3], dx

    def inverse(self, x: np.ndarray, ctx: np.ndarray):
        """Normalizing direction: z = (x - mu) * exp(-s), logdet = -sum(s)."""
        mu, s, cache = self.forward(x, ctx)
        z = (x - mu) * np.exp(-s)
        if not np.all(np.isfinite(z)):
            raise TrainingError("non-finite activations in affine transform")
        return z, -s.sum(axis=1), (mu, s, cache)

    def sample(self, z: np.ndarray, ctx: np.ndarray) -> np.ndarray:
        """Generative direction, inverted dimension-by-dimension (d passes)."""
        x = np.zeros_like(z)
        ctx_pre = self.context_projection(ctx)
        for i in range(self.d):
            mu, s, _ = self.forward(x, ctx, ctx_pre)
            x[:, i] = z[:, i] * np.exp(s[:, i]) + mu[:, i]
        if not np.all(np.isfinite(x)):
            raise SamplingError("non-finite values while inverting the transform")
        return x

    def arch(self) -> dict:
        return {"d": self.d, "ctx_dim": self.ctx_dim,
                "hidden_sizes": list(self.hidden_sizes)}


def forward_inverse(layer: MadeLayer, theta: np.ndarray, ctx: np.ndarray):
    """Single-vector convenience wrapper around the normalizing pass."""
    z, logdet, _ = layer.inverse(np.atleast_2d(theta), np.atleast_2d(ctx))
    return z[0], float(logdet[0])


def forward_sample(layer: MadeLayer, z: np.ndarray, ctx: np.ndarray) -> np.ndarray:
    return layer.sample(np.atleast_2d(z), np.atleast_2d(ctx))[0]


@dataclass
class Standardizer:
    mean: np.ndarray
    sd: np.ndarray

    @classmethod
    def fit(cls, data: np.ndarray, sd_floor: float = 1e-8) -> "Standardizer":
        mean = data.mean(axis=0)
        sd = np.maximum(data.std(axis=0), sd_floor)
        return cls(mean=mean, sd=sd)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.sd

    def unapply(self, z: np.ndarray) -> np.ndarray:
        return z * self.sd + self.mean

    @property
    def log_jacobian(self) -> float:
        """Log-density correction from standardizing: -sum(log sd)."""
        return float(-np.log(self.sd).sum())


@dataclass
class SupportPolicy:
    """Per-dimension support box with two enforcement modes: dimensions with
    `reject_mask` set are enforced by resampling whole draws; the rest are
    clipped to the box (used for state floors, which genuinely carry mass)."""

    low: np.ndarray
    high: np.ndarray
    reject_mask: np.ndarray


class FlowModel:
    """Ordered (permutation, MadeLayer) blocks with input standardizers."""

    def __init__(self, d: int, ctx_dim: int, n_blocks: int = 5,
                 hidden_sizes: tuple[int, int] = (50, 50), seed: int = 0):
        self.d = d
        self.ctx_dim = ctx_dim
        self.seed = seed
        rng = np.random.default_rng(seed)
        reverse = np.arange(d)[::-1].copy()
        self.blocks: list[tuple[np.ndarray, MadeLayer]] = [
            (reverse.copy(), MadeLayer(d, ctx_dim, hidden_sizes, rng))
            for _ in range(n_blocks)]
        self.std_theta: Standardizer | None = None
        self.std_y: Standardizer | None = None

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    @property
    def hidden_sizes(self) -> tuple[int, int]:
        return self.blocks[0][1].hidden_sizes

    def set_standardizers(self, thetas: np.ndarray, observations: np.ndarray) -> None:
        self.std_theta = Standardizer.fit(np.asarray(thetas, dtype=float))
        self.std_y = Standardizer.fit(np.asarray(observations, dtype=float))

    def require_fitted(self) -> None:
        if self.std_theta is None or self.std_y is None:
            raise StateError("standardizers are not fitted; train the model first")

    def parameters(self) -> list[np.ndarray]:
        out = []
        for _, layer in self.blocks:
            out.extend(layer.params())
        return out

    def set_parameters(self, arrays: list[np.ndarray]) -> None:
        per = len(MadeLayer.PARAM_NAMES)
        for k, (_, layer) in enumerate(self.blocks):
            layer.set_params(arrays[k * per:(k + 1) * per])

    def copy_parameters(self) -> list[np.ndarray]:
        return [p.copy() for p in self.parameters()]

    # ---- density and sampling -------------------------------------------

    def _inverse_std(self, t_std: np.ndarray, c_std: np.ndarray, keep_caches=False):
        """Compose all blocks in the normalizing direction on standardized data."""
        u = t_std
        total_ld = np.zeros(t_std.shape[0])
        caches = []
        for perm, layer in self.blocks:
            v = u[:, perm]
            z, ld, cache = layer.inverse(v, c_std)
            total_ld += ld
            if keep_caches:
                caches.append((perm, cache))
            u = z
        return u, total_ld, caches

    def log_prob_std(self, t_std: np.ndarray, c_std: np.ndarray) -> np.ndarray:
        u, total_ld, _ = self._inverse_std(t_std, c_std)
        return -0.5 * (u ** 2).sum(axis=1) - 0.5 * self.d * LOG_2PI + total_ld

    def sample_std(self, c_std: np.ndarray, z: np.ndarray) -> np.ndarray:
        """Map base-space draws through the generative direction."""
        u = z
        for perm, layer in reversed(self.blocks):
            v = layer.sample(u, c_std)
            u_prev = np.empty_like(v)
            u_prev[:, perm] = v
            u = u_prev
        return u


def log_prob(model: FlowModel, theta_hat: np.ndarray, y: np.ndarray):
    """Conditional log density in original units (standardization included)."""
    model.require_fitted()
    theta_hat = np.asarray(theta_hat, dtype=float)
    y = np.asarray(y, dtype=float)
    single = theta_hat.ndim == 1
    t = np.atleast_2d(theta_hat)
    c = np.atleast_2d(y)
    if c.shape[0] == 1 and t.shape[0] > 1:
        c = np.broadcast_to(c, (t.shape[0], c.shape[1]))
    t_std = model.std_theta.apply(t)
    c_std = model.std_y.apply(c)
    lp = model.log_prob_std(t_std, c_std) + model.std_theta.log_jacobian
    return float(lp[0]) if single else lp


def sample(model: FlowModel, y: np.ndarray, n: int, rng: np.random.Generator,
           support: SupportPolicy | None = None, max_rounds: int = 50):
    """Draw n conditional samples; returns (samples (n, d), leakage_rate).

    With a support policy, rejected rows are redrawn (up to `max_rounds`);
    clip-mode dimensions are projected onto the box instead, since their
    boundary carries genuine probability mass.
    """
    if n < 1:
        raise ValidationError("sample count must be >= 1")
    model.require_fitted()
    y = np.asarray(y, dtype=float)
    if y.ndim != 1 or y.size != model.ctx_dim:
        raise ValidationError(f"y must be a {model.ctx_dim}-vector")
    c_std = np.broadcast_to(model.std_y.apply(y[None, :]), (n, model.ctx_dim))

    z = rng.standard_normal((n, model.d))
    out = model.std_theta.unapply(model.sample_std(c_std, z))
    n_rejected = 0
    if support is not None:
        rej = support.reject_mask
        for _ in range(max_rounds):
            bad = ((out[:, rej] < support.low[rej]) |
                   (out[:, rej] > support.high[rej])).any(axis=1)
            if not bad.any():
                break
            n_rejected += int(bad.sum())
            idx = np.nonzero(bad)[0]
            z = rng.standard_normal((idx.size, model.d))
            redraw = model.std_theta.unapply(
                model.sample_std(c_std[:idx.size], z))
            out[idx] = redraw
        else:
            raise SamplingError(
                f"support rejection did not converge after {max_rounds} rounds "
                f"({n_rejected} rejected for {n} requested)")
        clip = ~rej
        out[:, clip] = np.clip(out[:, clip], support.low[clip], support.high[clip])
    leakage = n_rejected / (n + n_rejected)
    if support is not None and leakage > 0.99:
        raise SamplingError(f"posterior leakage {leakage:.3f} exceeds 99%")
    return out, leakage


# ---- training ------------------------------------------------------------

@dataclass
class TrainConfig:
    batch_size: int = 200
    learning_rate: float = 5e-4
    grad_clip_norm: float = 5.0
    val_fraction: float = 0.10
    patience: int = 20
    max_epochs: int = 500
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    min_dataset_rows: int = 100  # below this a warning is recorded

    def __post_init__(self) -> None:
        if not 0.0 < self.val_fraction < 1.0:
            raise ValidationError("val_fraction must be in (0, 1)")
        if self.batch_size < 1 or self.patience < 1 or self.max_epochs < 1:
            raise ValidationError("batch_size, patience and max_epochs must be >= 1")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "batch_size", "learning_rate", "grad_clip_norm", "val_fraction",
            "patience", "max_epochs", "adam_beta1", "adam_beta2", "adam_eps",
            "min_dataset_rows")}


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    initial_train_loss: float = math.nan
    initial_val_loss: float = math.nan
    best_epoch: int = -1
    best_val_loss: float = math.inf
    stopped_epoch: int = -1
    warnings: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    wall_time_s: float = math.nan  # informational; never serialized into checkpoints

    def metrics_dict(self) -> dict:
        """Deterministic summary for checkpoint headers (no wall-clock)."""
        return {"best_epoch": self.best_epoch, "best_val_loss": self.best_val_loss,
                "stopped_epoch": self.stopped_epoch,
                "initial_val_loss": self.initial_val_loss}


class Adam:
    """Adaptive-moment gradient descent over a list of parameter arrays."""

    def __init__(self, params: list[np.ndarray], lr: float, beta1: float,
                 beta2: float, eps: float):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


def clip_global_norm(grads: list[np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if total > max_norm and total > 0.0:
        scale = max_norm / total
        for g in grads:
            g *= scale
    return total


def nll_and_grads(model: FlowModel, t_std: np.ndarray, c_std: np.ndarray):
    """Mean negative log density over the batch (standardized space) and its
    gradients with respect to every parameter array (same order as
    `model.parameters()`). The de-standardization constant is not included."""
    n = t_std.shape[0]
    u, total_ld, caches = model._inverse_std(t_std, c_std, keep_caches=True)
    loss = float((0.5 * (u ** 2).sum(axis=1) - total_ld).mean()) \
        + 0.5 * model.d * LOG_2PI

    g = u / n  # d(mean NLL)/du for the base-density term
    grads_per_block: list[list[np.ndarray]] = [None] * len(model.blocks)
    for k in range(len(model.blocks) - 1, -1, -1):
        perm, layer = model.blocks[k]
        _, cache = caches[k]
        mu, s, net_cache = cache
        v = net_cache[0]
        z = (v - mu) * np.exp(-s)
        dmu = -g * np.exp(-s)
        ds = -g * z + 1.0 / n  # + logdet term d(mean sum s)/ds
        dv_direct = g * np.exp(-s)
        layer_grads, dv_net = layer.backward(net_cache, dmu, ds)
        grads_per_block[k] = layer_grads
        dv = dv_direct + dv_net
        g_prev = np.empty_like(dv)
        g_prev[:, perm] = dv
        g = g_prev
    grads = [arr for block in grads_per_block for arr in block]
    return loss, grads


def _mean_nll(model: FlowModel, t_std: np.ndarray, c_std: np.ndarray) -> float:
    lp = model.log_prob_std(t_std, c_std)
    return float(-lp.mean())


def train(model: FlowModel, thetas: np.ndarray, observations: np.ndarray,
          cfg: TrainConfig, rng: np.random.Generator) -> tuple[FlowModel, TrainHistory]:
    """Maximum-likelihood training with early stopping on a validation split.

    Returns the same model object holding the best-validation weights, plus
    the loss history. Losses are reported in original units (standardization
    constant included) so they match `log_prob`.
    """
    import time as _time

    thetas = np.asarray(thetas, dtype=float)
    observations = np.asarray(observations, dtype=float)
    n = thetas.shape[0]
    if n < 2:
        raise TrainingError("training needs at least 2 rows")
    if not (np.isfinite(thetas).all() and np.isfinite(observations).all()):
        raise TrainingError("training data contains non-finite values")
    hist = TrainHistory(config=cfg.to_dict())
    if n < cfg.min_dataset_rows:
        hist.warnings.append(f"insufficient data: {n} rows < {cfg.min_dataset_rows}")

    t_start = _time.monotonic()
    order = rng.permutation(n)
    n_val = max(1, int(round(cfg.val_fraction * n)))
    if n_val >= n:
        n_val = n - 1
    val_idx, train_idx = order[:n_val], order[n_val:]

    model.set_standardizers(thetas[train_idx], observations[train_idx])
    const = -model.std_theta.log_jacobian  # added to NLL in original units
    t_std = model.std_theta.apply(thetas)
    c_std = model.std_y.apply(observations)
    t_tr, c_tr = t_std[train_idx], c_std[train_idx]
    t_va, c_va = t_std[val_idx], c_std[val_idx]

    hist.initial_train_loss = _mean_nll(model, t_tr, c_tr) + const
    hist.initial_val_loss = _mean_nll(model, t_va, c_va) + const
    hist.best_val_loss = hist.initial_val_loss
    best_params = model.copy_parameters()
    hist.best_epoch = 0

    opt = Adam(model.parameters(), cfg.learning_rate, cfg.adam_beta1,
               cfg.adam_beta2, cfg.adam_eps)
    epochs_since_best = 0
    for epoch in range(1, cfg.max_epochs + 1):
        perm = rng.permutation(train_idx.size)
        batch_losses = []
        for start in range(0, perm.size, cfg.batch_size):
            sel = perm[start:start + cfg.batch_size]
            try:
                loss, grads = nll_and_grads(model, t_tr[sel], c_tr[sel])
            except TrainingError as exc:
                raise TrainingError(
                    f"{exc} (epoch {epoch}, batch {start // cfg.batch_size})") from exc
            if not math.isfinite(loss):
                raise TrainingError(
                    f"NaN loss at epoch {epoch}, batch {start // cfg.batch_size}")
            clip_global_norm(grads, cfg.grad_clip_norm)
            opt.step(grads)
            batch_losses.append(loss + const)
        hist.train_loss.append(float(np.mean(batch_losses)))

        val = _mean_nll(model, t_va, c_va) + const
        hist.val_loss.append(val)
        if val < hist.best_val_loss:
            hist.best_val_loss = val
            hist.best_epoch = epoch
            best_params = model.copy_parameters()
            epochs_since_best = 0
        else:
            epochs_since_best += 1
        if epochs_since_best >= cfg.patience:
            hist.stopped_epoch = epoch
            break
    else:
        hist.stopped_epoch = cfg.max_epochs

    model.set_parameters(best_params)
    hist.wall_time_s = _time.monotonic() - t_start
    return model, hist


def gradcheck(model: FlowModel, theta_batch: np.ndarray, y_batch: np.ndarray,
              step: float = 1e-5) -> float:
    """Max relative error between analytic gradients and central differences.

    Exhaustive over every parameter entry, so intended for small test
    architectures. Data is used raw (treated as already standardized).
    """
    t = np.atleast_2d(np.asarray(theta_batch, dtype=float))
    c = np.atleast_2d(np.asarray(y_batch, dtype=float))
    _, grads = nll_and_grads(model, t, c)
    params = model.parameters()
    worst = 0.0
    for p, g in zip(params, grads):
        flat_p = p.ravel()
        flat_g = g.ravel()
        for i in range(flat_p.size):
            orig = flat_p[i]
            flat_p[i] = orig + step
            loss_hi = _mean_nll(model, t, c)
            flat_p[i] = orig - step
            loss_lo = _mean_nll(model, t, c)
            flat_p[i] = orig
            numeric = (loss_hi - loss_lo) / (2.0 * step)
            scale = max(abs(numeric), abs(flat_g[i]))
            if scale < 1e-7:
                continue
            worst = max(worst, abs(numeric - flat_g[i]) / scale)
    return worst
