"""The trainable mapping h and both training losses with analytic gradients.

The mapping is a single linear layer followed by per-sample feature
normalization (no learnable affine) and a rectifier. Gradients are
derived by hand and validated against central finite differences; see
gradient_check_report for the standalone checker.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, ShapeError

SIGN_MODES = ("semantic", "as_printed")


@dataclass
class MappingNet:
    """Linear map + per-sample normalization + rectifier."""

    weight: np.ndarray  # p x d_z
    bias: np.ndarray    # p
    norm_epsilon: float = 1e-5

    @classmethod
    def initialize(cls, d_z: int, p: int = 50, rng=None, norm_epsilon: float = 1e-5):
        """Weights i.i.d. uniform in +-1/sqrt(d_z), zero bias."""
        rng = np.random.default_rng(rng)
        bound = 1.0 / np.sqrt(d_z)
        return cls(
            weight=rng.uniform(-bound, bound, size=(p, d_z)),
            bias=np.zeros(p),
            norm_epsilon=norm_epsilon,
        )

    @property
    def prototype_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def input_dim(self) -> int:
        return self.weight.shape[1]


@dataclass
class ProxyBank:
    """Trainable proxies theta_q and their momentum twins theta_m."""

    theta_q: np.ndarray  # C x P x p
    theta_m: np.ndarray  # C x P x p
    gamma: float

    @classmethod
    def initialize(cls, n_classes: int, per_class: int, p: int, gamma: float, rng=None):
        """Random start with theta_m = theta_q (standard normal scaled by 0.1)."""
        rng = np.random.default_rng(rng)
        theta_q = 0.1 * rng.standard_normal((n_classes, per_class, p))
        return cls(theta_q=theta_q, theta_m=theta_q.copy(), gamma=gamma)

    @property
    def n_classes(self) -> int:
        return self.theta_q.shape[0]

    @property
    def per_class(self) -> int:
        return self.theta_q.shape[1]

    def flat_proxies(self, which: str = "q") -> tuple[np.ndarray, np.ndarray]:
        """(K x p proxies, K class ids) with K = C * P, slot-major per class."""
        t = self.theta_q if which == "q" else self.theta_m
        k = self.n_classes * self.per_class
        classes = np.repeat(np.arange(self.n_classes), self.per_class)
        return t.reshape(k, -1), classes


@dataclass
class LossBreakdown:
    pa_loss: float
    manifold_loss: float
    total: float
    grads: dict = field(default_factory=dict)


def _forward_cached(net: MappingNet, Z: np.ndarray):
    Y = Z @ net.weight.T + net.bias
    mu = Y.mean(axis=1, keepdims=True)
    var = Y.var(axis=1, keepdims=True)
    sigma = np.sqrt(var + net.norm_epsilon)
    yhat = (Y - mu) / sigma
    out = np.maximum(yhat, 0.0)
    return out, (yhat, sigma)


def forward_batch(net: MappingNet, Z) -> np.ndarray:
    """Apply the mapping row-wise to an N x d_z batch."""
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[1] != net.input_dim:
        raise ShapeError(f"batch shape {Z.shape} incompatible with d_z={net.input_dim}")
    out, _ = _forward_cached(net, Z)
    return out


def forward(net: MappingNet, z) -> np.ndarray:
    """Map one d_z vector to its rectified normalized embedding."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (net.input_dim,):
        raise ShapeError(f"input shape {z.shape} != (d_z={net.input_dim},)")
    return forward_batch(net, z[None, :])[0]


def backward_through_net(net: MappingNet, Z: np.ndarray, cache,
                         grad_out: np.ndarray) -> dict:
    """Chain dL/d(output) back to the linear parameters.

    Per-sample normalization backward: with gh = dL/dyhat,
    dL/dy = (gh - mean(gh) - yhat * mean(gh * yhat)) / sigma.
    """
    yhat, sigma = cache
    gh = grad_out * (yhat > 0.0)
    p = yhat.shape[1]
    g_mean = gh.mean(axis=1, keepdims=True)
    gy_mean = (gh * yhat).mean(axis=1, keepdims=True)
    dy = (gh - g_mean - yhat * gy_mean) / sigma
    return {"weight": dy.T @ Z, "bias": dy.sum(axis=0)}


def _stable_log1p_sumexp(x: np.ndarray):
    """log(1 + sum exp(x)) and the softmax-style weights exp(x)/(1+sum exp)."""
    if x.size == 0:
        return 0.0, x
    m = max(0.0, float(x.max()))
    shifted = np.exp(x - m)
    denom = np.exp(-m) + shifted.sum()
    return m + np.log(denom), shifted / denom


def pa_loss(embeddings, labels, bank: ProxyBank, alpha: float, eps_margin: float,
            sign_mode: str = "semantic"):
    """Proxy-anchor loss over Euclidean distances.

    In "semantic" mode the positive exponent grows with distance (so
    minimizing pulls same-class embeddings toward their proxy) and the
    negative exponent shrinks with distance; "as_printed" swaps both
    signs. Returns (loss, grads) with gradients for the embeddings and
    theta_q.
    """
    if sign_mode not in SIGN_MODES:
        raise ValueError(f"sign_mode must be one of {SIGN_MODES}, got {sign_mode!r}")
    H = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    proxies, proxy_class = bank.flat_proxies("q")
    n, k = H.shape[0], proxies.shape[0]
    if k == 0:
        raise ConfigError("proxy bank is empty")
    if n == 0:
        raise ValueError("batch must contain at least one embedding")

    diff = H[:, None, :] - proxies[None, :, :]          # n x k x p
    dist = np.sqrt((diff**2).sum(axis=2))               # n x k
    unit = diff / np.maximum(dist, 1e-12)[:, :, None]
    pos_mask = labels[:, None] == proxy_class[None, :]

    s_pos = alpha if sign_mode == "semantic" else -alpha
    s_neg = -alpha if sign_mode == "semantic" else alpha

    grad_h = np.zeros_like(H)
    grad_proxy = np.zeros_like(proxies)
    active = [kk for kk in range(k) if pos_mask[:, kk].any()]

    pos_total = 0.0
    for kk in active:
        rows = np.flatnonzero(pos_mask[:, kk])
        term, weights = _stable_log1p_sumexp(s_pos * (dist[rows, kk] - eps_margin))
        pos_total += term
        coef = (weights * s_pos / len(active))[:, None] * unit[rows, kk]
        grad_h[rows] += coef
        grad_proxy[kk] -= coef.sum(axis=0)
    pos_term = pos_total / len(active) if active else 0.0

    neg_total = 0.0
    for kk in range(k):
        rows = np.flatnonzero(~pos_mask[:, kk])
        if rows.size == 0:
            continue
        term, weights = _stable_log1p_sumexp(s_neg * (dist[rows, kk] - eps_margin))
        neg_total += term
        coef = (weights * s_neg / k)[:, None] * unit[rows, kk]
        grad_h[rows] += coef
        grad_proxy[kk] -= coef.sum(axis=0)
    neg_term = neg_total / k

    loss = pos_term + neg_term
    grads = {
        "embeddings": grad_h,
        "theta_q": grad_proxy.reshape(bank.theta_q.shape),
    }
    return loss, grads


def manifold_loss(embeddings, S, delta: float):
    """Squared mismatch between embedding distances and delta * (1 - S).

    Summed over ordered pairs i != j; S is a constant target. Returns
    (loss, grads) with the embedding gradient.
    """
    H = np.asarray(embeddings, dtype=np.float64)
    S = np.asarray(S, dtype=np.float64)
    n = H.shape[0]
    if S.shape != (n, n):
        raise ShapeError(f"similarity matrix {S.shape} does not match batch size {n}")
    if not np.array_equal(S, S.T):
        raise ContractError("similarity matrix must be symmetric")

    diff = H[:, None, :] - H[None, :, :]
    dist = np.sqrt((diff**2).sum(axis=2))
    residual = delta * (1.0 - S) - dist
    np.fill_diagonal(residual, 0.0)
    loss = float((residual**2).sum())

    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(dist > 0.0, residual / dist, 0.0)
    grad_h = -4.0 * (ratio[:, :, None] * diff).sum(axis=1)
    return loss, {"embeddings": grad_h}


def total_loss(net: MappingNet, Z, labels, bank: ProxyBank, S, alpha: float,
               eps_margin: float, delta: float,
               sign_mode: str = "semantic") -> LossBreakdown:
    """Joint objective: proxy-anchor plus manifold point-to-point loss.

    Embedding gradients from both losses are summed and chained through
    the mapping to the linear parameters.
    """
    Z = np.asarray(Z, dtype=np.float64)
    H, cache = _forward_cached(net, Z)
    pa, pa_grads = pa_loss(H, labels, bank, alpha, eps_margin, sign_mode)
    man, man_grads = manifold_loss(H, S, delta)
    grad_h = pa_grads["embeddings"] + man_grads["embeddings"]
    net_grads = backward_through_net(net, Z, cache, grad_h)
    return LossBreakdown(
        pa_loss=pa,
        manifold_loss=man,
        total=pa + man,
        grads={
            "weight": net_grads["weight"],
            "bias": net_grads["bias"],
            "theta_q": pa_grads["theta_q"],
        },
    )


def _central_difference(fn, arr: np.ndarray, step: float = 1e-4) -> np.ndarray:
    grad = np.zeros_like(arr)
    flat = arr.ravel()
    out = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = fn()
        flat[i] = orig - step
        lo = fn()
        flat[i] = orig
        out[i] = (hi - lo) / (2.0 * step)
    return grad


def _max_rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    # relative error with an absolute escape hatch scaled to the tensor's
    # gradient magnitude; entries far below that scale are beyond what
    # float64 finite differences can resolve
    scale = max(1.0, float(np.abs(analytic).max()), float(np.abs(numeric).max()))
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6 * scale)
    return float((np.abs(analytic - numeric) / denom).max())


def gradient_check_report(seed: int = 0, n: int = 16, d_z: int = 8, p: int = 50,
                          n_classes: int = 3, corrupt: str | None = None) -> dict:
    """Compare every analytic gradient against central finite differences.

    Returns {component: max relative error}. The corrupt hook perturbs
    one component's analytic gradient; it exists so the failure path of
    the CLI checker can be exercised.
    """
    for attempt in range(64):
        rng = np.random.default_rng([seed, attempt])
        net = MappingNet.initialize(d_z, p, rng)
        Z = rng.standard_normal((n, d_z))
        _, (yhat, _) = _forward_cached(net, Z)
        # finite differences cross the rectifier kink when any pre-relu
        # activation sits within the probe step's reach of zero; redraw
        if np.abs(yhat).min() > 3e-3:
            break
    bank = ProxyBank.initialize(n_classes, 1, p, gamma=0.999, rng=rng)
    labels = rng.integers(0, n_classes, size=n)
    S = _random_similarity(n, rng)
    alpha, eps_margin, delta = 32.0, 0.1, 2.0

    report = {}

    H = forward_batch(net, Z)
    # keep the standalone loss checks off exact proxy hits
    H = H + 0.01

    for mode in SIGN_MODES:
        _, grads = pa_loss(H, labels, bank, alpha, eps_margin, mode)
        gh = grads["embeddings"].copy()
        gq = grads["theta_q"].copy()
        if corrupt == f"pa_loss_{mode}":
            gh += 0.5
        fd_h = _central_difference(
            lambda: pa_loss(H, labels, bank, alpha, eps_margin, mode)[0], H)
        fd_q = _central_difference(
            lambda: pa_loss(H, labels, bank, alpha, eps_margin, mode)[0],
            bank.theta_q)
        report[f"pa_loss_{mode}"] = max(_max_rel_err(gh, fd_h), _max_rel_err(gq, fd_q))

    _, grads = manifold_loss(H, S, delta)
    gm = grads["embeddings"].copy()
    if corrupt == "manifold_loss":
        gm += 0.5
    fd_m = _central_difference(lambda: manifold_loss(H, S, delta)[0], H)
    report["manifold_loss"] = _max_rel_err(gm, fd_m)

    breakdown = total_loss(net, Z, labels, bank, S, alpha, eps_margin, delta)
    gw = breakdown.grads["weight"].copy()
    gb = breakdown.grads["bias"].copy()
    if corrupt == "forward_chain":
        gw += 0.5
    fd_w = _central_difference(lambda: total_loss(
        net, Z, labels, bank, S, alpha, eps_margin, delta).total, net.weight)
    fd_b = _central_difference(lambda: total_loss(
        net, Z, labels, bank, S, alpha, eps_margin, delta).total, net.bias)
    report["forward_chain"] = max(_max_rel_err(gw, fd_w), _max_rel_err(gb, fd_b))
    return report


def _random_similarity(n: int, rng) -> np.ndarray:
    raw = rng.uniform(0.05, 0.95, size=(n, n))
    sym = 0.5 * (raw + raw.T)
    np.fill_diagonal(sym, 1.0)
    return sym
