"""Naive, FGSM adversarial, ISR (reweighing) and ISP (perturbation) training.

All four trainers share one epoch loop. Shuffling, flips and FGSM starts are
drawn from per-epoch streams ``(seed, purpose, epoch)``, so a run can be split
at any epoch (pretraining reuse, checkpoint resume) without changing the
trajectory, and the degenerate settings (ISR m=1, ISP gamma=0, AT alpha=eps=0)
reproduce naive training bit for bit.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from inflrobust import influence, nn
from inflrobust.datagen import Split, stream

log = logging.getLogger(__name__)

_SHUFFLE = 0x5AF1
_FGSM = 0xF65A


@dataclass
class TrainConfig:
    epochs: int = 40
    pretrain_epochs: int = 10
    lr: float = 0.01
    batch_size: int = 32
    max_weight: float = 2.0
    ratio: float = 0.1
    gamma: float = 0.01
    fgsm_alpha: float = 0.03
    fgsm_eps: float = 0.1
    seed: int = 0
    augment: bool = True

    def __post_init__(self):
        if self.epochs < 0 or self.pretrain_epochs < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.lr <= 0 or self.batch_size < 1:
            raise ValueError("lr must be > 0 and batch_size >= 1")
        if self.max_weight < 1:
            raise ValueError(f"max_weight must be >= 1, got {self.max_weight}")
        if not 0 < self.ratio <= 1:
            raise ValueError(f"ratio must be in (0, 1], got {self.ratio}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if not self.fgsm_eps >= self.fgsm_alpha >= 0:
            raise ValueError("FGSM needs eps >= alpha >= 0")

    def check_two_phase(self):
        if not 1 <= self.pretrain_epochs < self.epochs:
            raise ValueError(
                f"need 1 <= pretrain_epochs < epochs, got {self.pretrain_epochs} and {self.epochs}"
            )


@dataclass
class TrainState:
    net: nn.Network
    adam: nn.AdamState
    history: list = field(default_factory=list)
    best_params: np.ndarray | None = None
    best_buffers: list | None = None
    best_epoch: int = 0
    best_val: float = -1.0
    # influence products fixed at T_pre (ISR weights, ISP selection and images)
    aux: dict = field(default_factory=dict)

    @property
    def epoch(self) -> int:
        return self.net.epoch

    def copy(self) -> TrainState:
        adam = nn.AdamState(self.adam.n_params, self.adam.lr, self.adam.beta1, self.adam.beta2,
                            self.adam.eps, self.adam.step, self.adam.m.copy(), self.adam.v.copy())
        return TrainState(
            self.net.copy(), adam, [dict(h) for h in self.history],
            None if self.best_params is None else self.best_params.copy(),
            None if self.best_buffers is None else [{k: v.copy() for k, v in b.items()} for b in self.best_buffers],
            self.best_epoch, self.best_val, {k: np.array(v, copy=True) for k, v in self.aux.items()},
        )

    def best_net(self) -> nn.Network:
        net = self.net.copy()
        if self.best_params is not None:
            net.params[:] = self.best_params
            net.buffers = [{k: v.copy() for k, v in b.items()} for b in self.best_buffers]
        return net


@dataclass
class RunResult:
    method: str
    state: TrainState
    info: dict = field(default_factory=dict)

    @property
    def net(self) -> nn.Network:
        return self.state.net


def init_state(arch, input_shape, cfg: TrainConfig) -> TrainState:
    net = nn.Network(arch, input_shape, seed=cfg.seed)
    return TrainState(net, nn.AdamState(len(net.params), lr=cfg.lr))


# ------------------------------------------------------------------- FGSM

def fgsm_attack(net: nn.Network, x, y, alpha: float, eps: float, rng: np.random.Generator) -> np.ndarray:
    """FGSM from a uniform random start, projected to the eps-ball and to [0, 1]."""
    if not eps >= alpha >= 0:
        raise ValueError("FGSM needs eps >= alpha >= 0")
    x = np.asarray(x, dtype=np.float64)
    delta = rng.uniform(-eps, eps, size=x.shape)
    mode = net.mode
    net.eval()
    try:
        g = nn.grad_input(net, x + delta, y)
    finally:
        net.mode = mode
    delta = np.clip(delta + alpha * np.sign(g), -eps, eps)
    return np.clip(x + delta, 0.0, 1.0)


# ------------------------------------------------------------ epoch loop

def run_epochs(state: TrainState, train: Split, cfg: TrainConfig, until: int, val: Split | None = None,
               weights: np.ndarray | None = None, adversarial: bool = False) -> TrainState:
    """Advance ``state`` to epoch ``until`` with minibatch Adam."""
    net, x, y = state.net, train.x, train.y
    n = len(y)
    if weights is not None:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.min() < 1.0 or weights.max() > cfg.max_weight:
            raise AssertionError("sample weights outside [1, m]")
    for epoch in range(state.epoch + 1, until + 1):
        rng = stream(cfg.seed, _SHUFFLE, epoch)
        order = rng.permutation(n)
        flips = rng.random(n) < 0.5 if cfg.augment else None
        rng_adv = stream(cfg.seed, _FGSM, epoch) if adversarial else None
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb = x[idx]
            if flips is not None:
                xb = np.where(flips[idx, None, None], xb[:, :, ::-1], xb)
            if adversarial:
                xb = fgsm_attack(net, xb, y[idx], cfg.fgsm_alpha, cfg.fgsm_eps, rng_adv)
            net.train()
            wb = None if weights is None else weights[idx]
            loss, grad, per = nn.loss_and_grad(net, xb, y[idx], wb)
            if wb is not None:
                plain = float(per.mean())
                tol = 1e-12 * max(1.0, plain)
                if not (plain - tol <= loss <= cfg.max_weight * plain + tol):
                    raise AssertionError(f"weighted loss {loss} outside [L, mL] with L={plain}")
            nn.adam_step(state.adam, net.params, grad)
            losses.append(loss)
        net.eval()
        net.epoch = epoch
        rec = {"epoch": epoch, "train_loss": float(np.mean(losses)) if losses else float("nan")}
        if val is not None:
            acc = nn.accuracy(net, val.x, val.y)
            rec["val_acc"] = acc
            if acc > state.best_val:
                state.best_val = acc
                state.best_epoch = epoch
                state.best_params = net.params.copy()
                state.best_buffers = [{k: v.copy() for k, v in b.items()} for b in net.buffers]
        state.history.append(rec)
        log.debug("epoch %d %s", epoch, rec)
    return state


def _start(train: Split, cfg: TrainConfig, arch, state: TrainState | None) -> TrainState:
    if state is not None:
        return state.copy()
    return init_state(arch or nn.DEFAULT_ARCH, (1,) + train.x.shape[1:], cfg)


def pretrain(train: Split, cfg: TrainConfig, arch=None, val: Split | None = None,
             state: TrainState | None = None) -> TrainState:
    """Plain training up to ``cfg.pretrain_epochs``."""
    state = _start(train, cfg, arch, state)
    return run_epochs(state, train, cfg, cfg.pretrain_epochs, val)


def train_naive(train: Split, cfg: TrainConfig, val: Split | None = None, arch=None,
                state: TrainState | None = None) -> RunResult:
    state = _start(train, cfg, arch, state)
    return RunResult("naive", run_epochs(state, train, cfg, cfg.epochs, val))


def train_at(train: Split, cfg: TrainConfig, val: Split | None = None, arch=None,
             state: TrainState | None = None) -> RunResult:
    state = _start(train, cfg, arch, state)
    return RunResult("at", run_epochs(state, train, cfg, cfg.epochs, val, adversarial=True))


# --------------------------------------------------------------------- ISR

def minmax_weights(scores, m: float) -> np.ndarray:
    """Affine map of scores onto [1, m]: lowest (most helpful) -> 1, highest -> m."""
    s = np.asarray(scores, dtype=np.float64)
    lo, hi = s.min(), s.max()
    if hi == lo or m == 1:
        return np.ones_like(s)
    w = 1.0 + (m - 1.0) * (s - lo) / (hi - lo)
    return np.clip(w, 1.0, m)


def influence_scores(net: nn.Network, train: Split, val: Split,
                     lissa: influence.LissaConfig | None = None):
    """``I_up,loss`` of every training example against the validation set."""
    net = net.copy().eval()
    data = influence.HeadData(net, train.x, train.y)
    st = influence.compute_s_test(net, train.x, train.y, val.x, val.y, lissa, data=data)
    return influence.influence_up_loss(net, train.x, train.y, st, data), st


def compute_isr_weights(net: nn.Network, train: Split, val: Split, m: float,
                        lissa: influence.LissaConfig | None = None):
    scores, st = influence_scores(net, train, val, lissa)
    return minmax_weights(scores, m), scores, st


def train_isr(train: Split, val: Split, cfg: TrainConfig, arch=None,
              lissa: influence.LissaConfig | None = None, state: TrainState | None = None) -> RunResult:
    cfg.check_two_phase()
    state = _start(train, cfg, arch, state)
    state = run_epochs(state, train, cfg, cfg.pretrain_epochs, val)
    if "isr_weights" not in state.aux:
        weights, _, st = compute_isr_weights(state.net, train, val, cfg.max_weight, lissa)
        state.aux["isr_weights"] = weights
        state.aux["lissa_residual"] = np.array(st.residual)
    weights = state.aux["isr_weights"]
    state = run_epochs(state, train, cfg, cfg.epochs, val, weights=weights)
    info = {"lissa_residual": float(state.aux["lissa_residual"]), "weight_min": float(weights.min()),
            "weight_max": float(weights.max()), "weight_mean": float(weights.mean())}
    return RunResult("isr", state, info)


# --------------------------------------------------------------------- ISP

def n_selected(ratio: float, n: int) -> int:
    """``ceil(ratio * n)`` without float round-up (0.1 * 600 is 60, not 61)."""
    return math.ceil(Fraction(str(ratio)) * n)


def select_influential(scores, ratio: float) -> tuple[np.ndarray, np.ndarray]:
    """Indices of the ceil(r n) highest-influence (most harmful) examples, and the rest.

    Ties keep the original index order.
    """
    if not 0 < ratio <= 1:
        raise ValueError(f"ratio must be in (0, 1], got {ratio}")
    s = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-s, kind="stable")
    k = n_selected(ratio, len(s))
    return np.sort(order[:k]), np.sort(order[k:])


def craft_isp_perturbations(net: nn.Network, x, y, s_test, gamma: float, chunk: int = 64) -> np.ndarray:
    """``clip(x - gamma * I_pert,loss(z), 0, 1)``: step against the pixel influence."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    for i in range(0, len(x), chunk):
        sl = slice(i, i + chunk)
        delta = -gamma * influence.influence_pert_loss(net, x[sl], y[sl], s_test)
        out[sl] = np.clip(x[sl] + delta, 0.0, 1.0)
    return out


def train_isp(train: Split, val: Split, cfg: TrainConfig, arch=None,
              lissa: influence.LissaConfig | None = None, state: TrainState | None = None) -> RunResult:
    cfg.check_two_phase()
    state = _start(train, cfg, arch, state)
    state = run_epochs(state, train, cfg, cfg.pretrain_epochs, val)
    if "isp_selected" not in state.aux:
        scores, st = influence_scores(state.net, train, val, lissa)
        sel, _ = select_influential(scores, cfg.ratio)
        state.aux["isp_selected"] = sel
        state.aux["isp_images"] = craft_isp_perturbations(state.net, train.x[sel], train.y[sel], st, cfg.gamma)
        state.aux["lissa_residual"] = np.array(st.residual)
    sel = state.aux["isp_selected"]
    perturbed = train.copy()
    perturbed.x[sel] = state.aux["isp_images"]
    state = run_epochs(state, perturbed, cfg, cfg.epochs, val)
    delta = perturbed.x[sel] - train.x[sel]
    info = {"lissa_residual": float(state.aux["lissa_residual"]), "selected": sel.tolist(),
            "delta_abs_mean": float(np.abs(delta).mean()) if len(sel) else 0.0,
            "delta_abs_max": float(np.abs(delta).max()) if len(sel) else 0.0}
    return RunResult("isp", state, info)


TRAINERS = {"naive": train_naive, "at": train_at, "isr": train_isr, "isp": train_isp}


def train_method(method: str, train: Split, val: Split, cfg: TrainConfig, arch=None,
                 lissa: influence.LissaConfig | None = None, state: TrainState | None = None) -> RunResult:
    if method in ("naive", "at"):
        return TRAINERS[method](train, cfg, val, arch, state=state)
    if method in ("isr", "isp"):
        return TRAINERS[method](train, val, cfg, arch, lissa, state=state)
    raise ValueError(f"unknown method {method!r}; expected one of {sorted(TRAINERS)}")
