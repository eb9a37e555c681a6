"""Group influence of training points on a validation set, head-restricted.

All second-order quantities live on the final dense layer. The shared factor
``s_test = H^-1 grad L(D_val)`` is computed once (LiSSA, or a dense solve for
small heads) and reused for every training point:

* ``influence_up_loss``   -s_test . grad_head l(z)          (positive = harmful)
* ``influence_pert_loss`` -d/dx [s_test . grad_head l(z)]   (per-pixel map)
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg

from inflrobust import nn

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e8
EXACT_MAX_HEAD = 2000


class LissaDivergence(FloatingPointError):
    pass


@dataclass
class LissaConfig:
    """LiSSA settings. ``scale=None`` picks a bound on the minibatch Hessian norm."""

    depth: int = 100
    scale: float | None = 25.0
    damping: float = 0.01
    repeats: int = 4
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"LiSSA depth must be >= 1, got {self.depth}")
        if self.scale is not None and not self.scale > 0:
            raise ValueError(f"LiSSA scale must be > 0, got {self.scale}")
        if self.damping < 0:
            raise ValueError(f"LiSSA damping must be >= 0, got {self.damping}")
        if self.repeats < 1:
            raise ValueError(f"LiSSA repeats must be >= 1, got {self.repeats}")
        if self.batch_size < 1:
            raise ValueError(f"LiSSA batch_size must be >= 1, got {self.batch_size}")


@dataclass
class STest:
    vector: np.ndarray
    method: str
    damping: float
    """Tikhonov damping of the system actually solved, ``(H + damping I) s = v``."""
    residual: float
    config: dict = field(default_factory=dict)


@dataclass
class InfluenceReport:
    scores: np.ndarray
    params_snapshot: str
    residual: float
    maps: np.ndarray | None = None
    maps_file: str | None = None
    method: str = "lissa"

    def to_json(self) -> str:
        out = {
            "params_snapshot": self.params_snapshot,
            "scores": [float(s) for s in self.scores],
            "residual": float(self.residual),
            "method": self.method,
        }
        if self.maps_file is not None:
            out["maps_file"] = self.maps_file
        return json.dumps(out, indent=1)


def params_snapshot(net: nn.Network) -> str:
    return hashlib.sha256(np.ascontiguousarray(net.params).tobytes()).hexdigest()[:16]


class HeadData:
    """Cached head features and probabilities of a dataset (eval mode)."""

    def __init__(self, net: nn.Network, x, y, batch_size: int = 256):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        parts = [nn.head_terms(net, x[i : i + batch_size], y[i : i + batch_size])
                 for i in range(0, len(x), batch_size)]
        self.phi = np.concatenate([p[0] for p in parts])
        self.probs = np.concatenate([p[1] for p in parts])
        self.resid = np.concatenate([p[2] for p in parts])

    def __len__(self):
        return len(self.phi)

    def hvp(self, v, idx=None, damping=0.0):
        if idx is None:
            return nn.hvp_from_terms(self.phi, self.probs, v, damping)
        return nn.hvp_from_terms(self.phi[idx], self.probs[idx], v, damping)

    def grads(self) -> np.ndarray:
        return nn.head_grads_from_terms(self.phi, self.resid)

    def hessian(self) -> np.ndarray:
        return nn.head_hessian_from_terms(self.phi, self.probs)

    def max_curvature(self) -> float:
        """Upper bound on the spectral norm of any minibatch head Hessian."""
        a = self.probs[:, :, None] * (np.eye(self.probs.shape[1]) - self.probs[:, None, :])
        lam = np.linalg.eigvalsh(a)[:, -1]
        return float(np.max(lam * (self.phi ** 2).sum(axis=1)))


def validation_gradient(net: nn.Network, x_val, y_val) -> np.ndarray:
    """Head gradient of the mean validation loss."""
    if len(x_val) == 0:
        raise ValueError("validation set is empty")
    return nn.grad_params(net.copy().eval(), x_val, y_val, head_only=True)


def _residual(data: HeadData, s: np.ndarray, v: np.ndarray, damping: float) -> float:
    nv = np.linalg.norm(v)
    if nv == 0:
        return 0.0
    return float(np.linalg.norm(data.hvp(s, damping=damping) - v) / nv)


def lissa_ihvp(net: nn.Network, x_trn, y_trn, v, cfg: LissaConfig | None = None,
               data: HeadData | None = None) -> STest:
    """Stochastic Neumann-series estimate of the damped inverse head Hessian times ``v``.

    Recursion ``v_{j+1} = v + (1 - damping) v_j - H_batch v_j / scale`` returning
    ``v_J / scale``; its fixed point solves ``(H + damping * scale * I) s = v``.
    """
    cfg = cfg or LissaConfig()
    data = data or HeadData(net, x_trn, y_trn)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (net.n_head,):
        raise nn.ShapeError(f"v must have length {net.n_head}, got {v.shape}")
    scale = cfg.scale if cfg.scale is not None else max(data.max_curvature(), 1e-12)
    n = len(data)
    bs = min(cfg.batch_size, n)
    estimates = []
    for r in range(cfg.repeats):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x155A, r]))
        cur = v.copy()
        for j in range(cfg.depth):
            idx = np.sort(rng.choice(n, size=bs, replace=False))
            cur = v + (1.0 - cfg.damping) * cur - data.hvp(cur, idx) / scale
            if np.max(np.abs(cur)) > DIVERGENCE_LIMIT or not np.all(np.isfinite(cur)):
                raise LissaDivergence(
                    f"LiSSA diverged at repeat {r}, step {j} (scale={scale:g}); use a larger scale"
                )
        estimates.append(cur / scale)
    s = np.mean(estimates, axis=0)
    damping = cfg.damping * scale
    res = _residual(data, s, v, damping)
    log.info("lissa: depth=%d repeats=%d scale=%.4g residual=%.4f", cfg.depth, cfg.repeats, scale, res)
    conf = asdict(cfg)
    conf["scale"] = float(scale)
    return STest(s, "lissa", damping, res, conf)


def exact_ihvp_oracle(net: nn.Network, x_trn, y_trn, v, damping: float,
                      data: HeadData | None = None) -> np.ndarray:
    """Dense solve of ``(H + damping I) s = v`` over the head (small heads only)."""
    if net.n_head > EXACT_MAX_HEAD:
        raise ValueError(f"head has {net.n_head} parameters; dense solve limited to {EXACT_MAX_HEAD}")
    data = data or HeadData(net, x_trn, y_trn)
    h = data.hessian() + damping * np.eye(net.n_head)
    return scipy.linalg.solve(h, np.asarray(v, dtype=np.float64), assume_a="sym")


def compute_s_test(net: nn.Network, x_trn, y_trn, x_val, y_val, cfg: LissaConfig | None = None,
                   exact_damping: float | None = None, data: HeadData | None = None) -> STest:
    """``H^-1 grad L(D_val)``; LiSSA by default, dense solve when ``exact_damping`` is set."""
    net = net.copy().eval()
    data = data or HeadData(net, x_trn, y_trn)
    g = validation_gradient(net, x_val, y_val)
    if exact_damping is not None:
        s = exact_ihvp_oracle(net, x_trn, y_trn, g, exact_damping, data)
        return STest(s, "exact", exact_damping, _residual(data, s, g, exact_damping))
    return lissa_ihvp(net, x_trn, y_trn, g, cfg, data)


def _vec(s_test) -> np.ndarray:
    return s_test.vector if isinstance(s_test, STest) else np.asarray(s_test, dtype=np.float64)


def influence_up_loss(net: nn.Network, x, y, s_test, data: HeadData | None = None) -> np.ndarray:
    """Per-example ``-s_test . grad_head l(z)``; positive means removing z lowers the val loss."""
    net = net.copy().eval()
    data = data or HeadData(net, x, y)
    return -(data.grads() @ _vec(s_test))


def influence_pert_loss(net: nn.Network, x, y, s_test) -> np.ndarray:
    """Per-pixel perturbation influence, shaped like ``x``."""
    return -nn.mixed_grad(net.copy().eval(), x, y, _vec(s_test))


def influence_param(net: nn.Network, x_trn, y_trn, x, y, mode: str = "removal", x_hat=None,
                    damping: float = 0.0, data: HeadData | None = None) -> np.ndarray:
    """Head-parameter influence of one example (exact inverse).

    removal: ``-H^-1 grad l(z)``; perturbation: ``-H^-1 (grad l(z_hat) - grad l(z))``.
    Removing z (or replacing it by z_hat) moves the head by roughly ``-result / n``.
    """
    net = net.copy().eval()
    x = np.asarray(x, dtype=np.float64)[None]
    y = np.atleast_1d(y)
    g = nn.grad_params(net, x, y, head_only=True)
    if mode == "perturbation":
        if x_hat is None:
            raise ValueError("perturbation mode needs the perturbed example x_hat")
        g = nn.grad_params(net, np.asarray(x_hat, dtype=np.float64)[None], y, head_only=True) - g
    elif mode != "removal":
        raise ValueError(f"mode must be 'removal' or 'perturbation', got {mode!r}")
    return -exact_ihvp_oracle(net, x_trn, y_trn, g, damping, data)


def influence_report(net: nn.Network, x_trn, y_trn, x_val, y_val, cfg: LissaConfig | None = None,
                     with_maps: bool = False) -> InfluenceReport:
    net = net.copy().eval()
    data = HeadData(net, x_trn, y_trn)
    st = compute_s_test(net, x_trn, y_trn, x_val, y_val, cfg, data=data)
    scores = influence_up_loss(net, x_trn, y_trn, st, data)
    maps = None
    if with_maps:
        x_trn = np.asarray(x_trn, dtype=np.float64)
        maps = np.concatenate([
            influence_pert_loss(net, x_trn[i : i + 64], y_trn[i : i + 64], st)
            for i in range(0, len(x_trn), 64)
        ])
    return InfluenceReport(scores, params_snapshot(net), st.residual, maps, method=st.method)


# ------------------------------------------------------ leave-one-out oracle

def logistic_net(n_features: int, n_classes: int, theta=None) -> nn.Network:
    """A bare softmax-regression head on fixed features."""
    net = nn.Network([nn.Dense(n_classes)], (n_features,), seed=None)
    if theta is not None:
        net.params[:] = theta
    return net


def fit_logistic(x, y, n_classes: int, l2: float, theta0=None, tol: float = 1e-12,
                 max_iter: int = 100) -> np.ndarray:
    """Newton's method on mean cross-entropy + (l2/2)|theta|^2, full batch."""
    x = np.asarray(x, dtype=np.float64)
    net = logistic_net(x.shape[1], n_classes, theta0)
    for _ in range(max_iter):
        data = HeadData(net, x, y)
        g = data.grads().mean(axis=0) + l2 * net.params
        if np.linalg.norm(g) < tol:
            break
        h = data.hessian() + l2 * np.eye(net.n_head)
        step = scipy.linalg.solve(h, g, assume_a="sym")
        net.params -= step
    return net.params.copy()


def _val_loss(theta, x_val, y_val, n_classes):
    net = logistic_net(np.shape(x_val)[1], n_classes, theta)
    return nn.cross_entropy(nn.forward(net, x_val), y_val)[0]


def loo_retrain_oracle(x_trn, y_trn, x_val, y_val, index: int, n_classes: int = 2,
                       l2: float = 0.01) -> float:
    """Actual validation-loss change from retraining without training point ``index``."""
    n = len(x_trn)
    if not 0 <= index < n:
        raise ValueError(f"index must be in [0, {n}), got {index}")
    theta = fit_logistic(x_trn, y_trn, n_classes, l2)
    keep = np.arange(n) != index
    theta_loo = fit_logistic(np.asarray(x_trn)[keep], np.asarray(y_trn)[keep], n_classes, l2)
    return _val_loss(theta_loo, x_val, y_val, n_classes) - _val_loss(theta, x_val, y_val, n_classes)
