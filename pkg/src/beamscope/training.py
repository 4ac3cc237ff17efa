"""Layer-by-layer training of unfolded LAMP / GM-LAMP networks.

Gradients come from torch autograd on a float64 mirror of the numpy forward
pass.  Every trainable value is a real leaf tensor: complex matrices and
means are split into ``.re`` / ``.im`` parts, mixture weights are logits and
variances are log-variances.  Parameter names look like ``B3.re``,
``lam0``, ``w1``, ``mu2.im`` and ``logvar0``.
"""

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from ._validation import check_random_state
from .estimators import (
    SIGMA2_FLOOR,
    LayerParams,
    NetworkKind,
    UnfoldedNetwork,
    network_forward,
)
from .measurement import MeasurementBatch, SnrPolicy, build_dataset
from .shrinkage import GmParams, SoftThresholdParams, fit_circular_gm

logger = logging.getLogger(__name__)

DTYPE = torch.float64
CDTYPE = torch.complex128
GM_INITS = ("em", "spike")


@dataclass
class TrainConfig:
    batch_size: int = 128
    lr_individual: float = 1e-3
    lr_joint_schedule: tuple = (5e-4, 1e-4, 1e-5)
    patience: int = 3
    min_rel_improvement: float = 1e-5
    max_steps: int = 2000
    seed: int = 0
    detach_stats: bool = False
    lam_init: float = 1.0
    nc: int = 4
    gm_init: str = "em"
    gm_log_var_init: object = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        rates = (self.lr_individual,) + tuple(self.lr_joint_schedule)
        if not all(rate > 0 for rate in rates) or not self.lr_joint_schedule:
            raise ValueError("learning rates must be positive and the joint schedule non-empty")
        if self.gm_init not in GM_INITS:
            raise ValueError(f"gm_init must be one of {GM_INITS}, got {self.gm_init!r}")
        if self.patience < 1 or self.max_steps < 1:
            raise ValueError("patience and max_steps must be >= 1")


# -- parameter packing --------------------------------------------------------


def shrink_names(kind, t):
    if NetworkKind(kind) is NetworkKind.LAMP:
        return [f"lam{t}"]
    return [f"w{t}", f"mu{t}.re", f"mu{t}.im", f"logvar{t}"]


def linear_names(t):
    return [f"B{t}.re", f"B{t}.im"]


def layer_names(kind, t):
    return linear_names(t) + shrink_names(kind, t)


def network_to_params(net):
    params = {}
    for t, layer in enumerate(net.layers):
        params[f"B{t}.re"] = layer.b.real.copy()
        params[f"B{t}.im"] = layer.b.imag.copy()
        if net.kind is NetworkKind.LAMP:
            params[f"lam{t}"] = np.array(layer.shrink.lam, dtype=float)
        else:
            th = layer.shrink
            params[f"w{t}"] = th.weights_raw.copy()
            params[f"mu{t}.re"] = th.means.real.copy()
            params[f"mu{t}.im"] = th.means.imag.copy()
            params[f"logvar{t}"] = th.log_vars.copy()
    return params


def params_to_network(params, kind, n_layers):
    kind = NetworkKind(kind)
    layers = []
    for t in range(n_layers):
        b = params[f"B{t}.re"] + 1j * params[f"B{t}.im"]
        if kind is NetworkKind.LAMP:
            # lambda is an unconstrained training variable; negative values act as zero
            shrink = SoftThresholdParams(max(float(params[f"lam{t}"]), 0.0))
        else:
            shrink = GmParams(params[f"w{t}"], params[f"mu{t}.re"] + 1j * params[f"mu{t}.im"],
                              params[f"logvar{t}"])
        layers.append(LayerParams(np.array(b), shrink))
    return UnfoldedNetwork(kind, layers)


def variable_class(name):
    """Group a parameter name into its variable class (``B.re``, ``w``, ``logvar`` ...)."""
    head, _, part = name.partition(".")
    base = head.rstrip("0123456789")
    return f"{base}.{part}" if part else base


# -- torch forward ------------------------------------------------------------


def _soft_torch(r, lam, sigma2):
    tau = torch.clamp(lam, min=0.0) * torch.sqrt(sigma2)[:, None]
    mag = torch.abs(r)
    alive = mag > tau
    safe = torch.where(alive, mag, torch.ones_like(mag))
    zero = torch.zeros_like(r)
    value = torch.where(alive, (1.0 - tau / safe) * r, zero)
    d_r = torch.where(alive, (1.0 - tau / (2.0 * safe)).to(CDTYPE), zero)
    d_rc = torch.where(alive, tau * r * r / (2.0 * safe**3), zero)
    return value, d_r, d_rc, alive


def _gm_torch(r, w, mu_re, mu_im, logvar, sigma2):
    # components on the leading axis and real arithmetic: both are several times faster in torch
    # than reducing over a short trailing axis of complex tensors
    log_p = torch.log_softmax(w, dim=0)[:, None, None]
    var = torch.exp(logvar)[:, None, None]
    mu_re, mu_im = mu_re[:, None, None], mu_im[:, None, None]
    s = sigma2[None, :, None] + var
    dx = r.real[None] - mu_re
    dy = r.imag[None] - mu_im
    post = torch.softmax(log_p - torch.log(math.pi * s) - (dx**2 + dy**2) / s, dim=0)
    gain = var / s
    mt_re = mu_re + gain * dx
    mt_im = mu_im + gain * dy
    # centred score terms (d log w_k / d r up to conjugation) weighted by the component means
    ex, ey = dx / s, dy / s
    cx = ex - torch.sum(post * ex, dim=0)
    cy = ey - torch.sum(post * ey, dim=0)
    pr, pi = post * mt_re, post * mt_im
    rx, ry = torch.sum(pr * cx, dim=0), torch.sum(pr * cy, dim=0)
    ix, iy = torch.sum(pi * cx, dim=0), torch.sum(pi * cy, dim=0)
    value = torch.complex(torch.sum(pr, dim=0), torch.sum(pi, dim=0))
    d_r = torch.complex(torch.sum(post * gain, dim=0) - rx - iy, ry - ix)
    d_rc = torch.complex(iy - rx, -ry - ix)
    return value, d_r, d_rc, None


def torch_forward(tp, a, y, kind, n_layers, detach_stats=False, check_finite=False):
    """Run ``n_layers`` layers; returns per-layer lists of ``r_t``, ``h_{t+1}`` and dead-zone masks."""
    kind = NetworkKind(kind)
    m = a.shape[0]
    h = torch.zeros((y.shape[0], a.shape[1]), dtype=CDTYPE)
    v = y
    a_c = a.to(CDTYPE)
    rs, hs, masks = [], [], []
    for t in range(n_layers):
        sigma2 = torch.clamp(torch.mean(v.real**2 + v.imag**2, dim=1), min=SIGMA2_FLOOR)
        if detach_stats:
            sigma2 = sigma2.detach()
        bmat = torch.complex(tp[f"B{t}.re"], tp[f"B{t}.im"])
        r = h + v @ bmat.T
        if kind is NetworkKind.LAMP:
            value, d_r, d_rc, mask = _soft_torch(r, tp[f"lam{t}"], sigma2)
        else:
            value, d_r, d_rc, mask = _gm_torch(r, tp[f"w{t}"], tp[f"mu{t}.re"], tp[f"mu{t}.im"],
                                               tp[f"logvar{t}"], sigma2)
        b = torch.sum(d_r, dim=1, keepdim=True) / m
        c = torch.sum(d_rc, dim=1, keepdim=True) / m
        if detach_stats:
            b, c = b.detach(), c.detach()
        h = value
        v = y - h @ a_c.T + b * v + c * torch.conj(v)
        if check_finite:
            for label, x in (("r", r), ("estimate", h), ("residual", v)):
                if not torch.all(torch.isfinite(torch.view_as_real(x))):
                    raise FloatingPointError(f"non-finite {label} in layer {t}")
        rs.append(r)
        hs.append(h)
        masks.append(mask)
    return rs, hs, masks


def _torch_params(params, trainable=()):
    out = {}
    for name, value in params.items():
        out[name] = torch.tensor(np.asarray(value, dtype=float), dtype=DTYPE,
                                 requires_grad=name in trainable)
    return out


def _batch_tensors(sys, batch):
    return (torch.tensor(sys.a, dtype=DTYPE),
            torch.tensor(np.asarray(batch.y), dtype=CDTYPE),
            torch.tensor(np.asarray(batch.truth), dtype=CDTYPE))


def _sq_err(x, truth):
    d = x - truth
    return torch.mean(torch.sum(d.real**2 + d.imag**2, dim=1))


def _torch_loss(tp, a, y, truth, kind, t, loss, detach_stats=False, check_finite=False):
    rs, hs, _ = torch_forward(tp, a, y, kind, t + 1, detach_stats, check_finite)
    if loss == "linear":
        return _sq_err(rs[t], truth)
    if loss == "nonlinear":
        return _sq_err(hs[t], truth)
    raise ValueError(f"unknown loss {loss!r}")


# -- losses (numpy reference path) -----------------------------------------


def _check_batch(batch):
    if len(batch) == 0:
        raise ValueError("empty batch")


def _mean_sq_err(x, truth):
    d = x - truth
    return float(np.mean(np.sum(d.real**2 + d.imag**2, axis=1)))


def loss_linear(sys, net, batch, t=None):
    """Mean squared distance between layer ``t``'s linear output ``r_t`` and the labels."""
    _check_batch(batch)
    t = net.n_layers - 1 if t is None else t
    _, trace = network_forward(sys, batch.y, net.prefix(t + 1))
    return _mean_sq_err(trace.r[t], batch.truth)


def loss_nonlinear(sys, net, batch, t=None):
    """Mean squared distance between layer ``t``'s estimate ``h_{t+1}`` and the labels."""
    _check_batch(batch)
    t = net.n_layers - 1 if t is None else t
    _, trace = network_forward(sys, batch.y, net.prefix(t + 1))
    return _mean_sq_err(trace.estimates[t], batch.truth)


# -- gradients ----------------------------------------------------------------


def backprop(net, sys, batch, loss="nonlinear", trainable=(), t=None, detach_stats=False):
    """Exact gradients of a layer loss with respect to the named raw parameters.

    Returns ``{name: gradient}`` with one real array per trainable name.
    """
    _check_batch(batch)
    trainable = list(trainable)
    if not trainable:
        return {}
    params = network_to_params(net)
    unknown = [name for name in trainable if name not in params]
    if unknown:
        raise KeyError(f"unknown parameters {unknown}")
    t = net.n_layers - 1 if t is None else t
    tp = _torch_params(params, trainable)
    a, y, truth = _batch_tensors(sys, batch)
    value = _torch_loss(tp, a, y, truth, net.kind, t, loss, detach_stats, check_finite=True)
    if not torch.isfinite(value):
        raise FloatingPointError(f"non-finite {loss} loss at layer {t}")
    value.backward()
    grads = {}
    for name in trainable:
        g = tp[name].grad
        g = np.zeros(params[name].shape) if g is None else g.numpy().copy()
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name} (layer {name_layer(name)})")
        grads[name] = g
    return grads


def name_layer(name):
    head = name.partition(".")[0]
    digits = head[len(head.rstrip("0123456789")):]
    return int(digits)


# -- Adam -----------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params, grads, state, lr):
    """One bias-corrected Adam update of the entries of ``params`` named in ``grads``.

    Returns new ``(params, state)``; the inputs are left untouched.
    """
    params = dict(params)
    new_m, new_v = dict(state.m), dict(state.v)
    step = state.step + 1
    bc1 = 1.0 - state.beta1**step
    bc2 = 1.0 - state.beta2**step
    for name, g in grads.items():
        p = np.asarray(params[name], dtype=float)
        if np.shape(g) != p.shape:
            raise ValueError(f"gradient for {name} has shape {np.shape(g)}, expected {p.shape}")
        m = state.beta1 * state.m.get(name, np.zeros_like(p)) + (1 - state.beta1) * g
        v = state.beta2 * state.v.get(name, np.zeros_like(p)) + (1 - state.beta2) * g * g
        new_m[name], new_v[name] = m, v
        params[name] = p - lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, AdamState(new_m, new_v, step, state.beta1, state.beta2, state.eps)


# -- layer-by-layer schedule -------------------------------------------------


@dataclass
class TrainReport:
    rows: list = field(default_factory=list)
    subprocedure_val_loss: list = field(default_factory=list)
    phase_steps: dict = field(default_factory=dict)
    wall_seconds: float = 0.0
    aborted: str = ""

    @property
    def total_steps(self):
        return sum(self.phase_steps.values())

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write("step,phase,train_loss,val_loss\n")
            for step, phase, train_loss, val_loss in self.rows:
                fh.write(f"{step},{phase},{train_loss:.17g},{val_loss:.17g}\n")


class _Trainer:
    def __init__(self, sys, train, val, kind, cfg):
        self.kind = NetworkKind(kind)
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.a, self.y, self.truth = _batch_tensors(sys, train)
        _, self.y_val, self.truth_val = _batch_tensors(sys, val)
        self.report = TrainReport()
        self.global_step = 0

    def val_loss(self, params, t, loss):
        tp = _torch_params(params)
        with torch.no_grad():
            return float(_torch_loss(tp, self.a, self.y_val, self.truth_val, self.kind, t, loss,
                                     self.cfg.detach_stats))

    def run_phase(self, params, names, t, loss, rates, label):
        cfg = self.cfg
        best = self.val_loss(params, t, loss)
        best_params = params
        if not math.isfinite(best):
            raise FloatingPointError(f"{label}: non-finite validation loss before training")
        steps = 0
        d = self.y.shape[0]
        for lr in rates:
            state = AdamState()
            stale = 0
            while stale < cfg.patience and steps < cfg.max_steps:
                order = self.rng.permutation(d)
                total, batches = 0.0, 0
                for start in range(0, d, cfg.batch_size):
                    if steps >= cfg.max_steps:
                        break
                    idx = torch.from_numpy(order[start:start + cfg.batch_size])
                    tp = _torch_params(params, names)
                    value = _torch_loss(tp, self.a, self.y[idx], self.truth[idx], self.kind, t, loss,
                                        cfg.detach_stats)
                    value.backward()
                    grads = {name: tp[name].grad.numpy().copy() for name in names}
                    params, state = adam_step(params, grads, state, lr)
                    total += value.item()
                    batches += 1
                    steps += 1
                    self.global_step += 1
                current = self.val_loss(params, t, loss)
                if not math.isfinite(current):
                    raise FloatingPointError(f"{label}: validation loss diverged at step {steps}")
                self.report.rows.append((self.global_step, label, total / max(batches, 1), current))
                if current < best * (1.0 - cfg.min_rel_improvement):
                    best, best_params, stale = current, params, 0
                else:
                    stale += 1
            params = best_params
            if steps >= cfg.max_steps:
                break
        self.report.phase_steps[label] = steps
        logger.info("%s: %d steps, val loss %.6g", label, steps, best)
        return best_params, best


def initial_shrink(kind, cfg, labels=None):
    """Starting shrinkage for layer 0.

    LAMP starts at ``lam_init``.  GM-LAMP either fits the mixture to the
    training labels by EM (``gm_init="em"``) or starts from the near-spike
    prior (``"spike"``, log-variances ``gm_log_var_init`` or the floor).
    """
    if NetworkKind(kind) is NetworkKind.LAMP:
        return SoftThresholdParams(cfg.lam_init)
    if cfg.gm_init == "em":
        if labels is None:
            raise ValueError("EM initialization needs training labels")
        return fit_circular_gm(labels, cfg.nc)
    if cfg.gm_log_var_init is None:
        return GmParams.initial(cfg.nc)
    return GmParams.initial(cfg.nc, cfg.gm_log_var_init)


def train_layer_by_layer(sys, train, val, kind, n_layers, cfg=None):
    """Greedy layer-wise training: for every new layer, fit its linear map,
    then its shrinkage, alternating individual and joint refinement."""
    cfg = cfg or TrainConfig()
    kind = NetworkKind(kind)
    if len(train) == 0 or len(val) == 0:
        raise ValueError("training and validation sets must be non-empty")
    if n_layers < 1:
        raise ValueError("need at least one layer")
    start = time.perf_counter()
    trainer = _Trainer(sys, train, val, kind, cfg)
    seed_net = UnfoldedNetwork.from_sensing(sys, kind, 1, initial_shrink(kind, cfg, train.truth))
    params = network_to_params(seed_net)
    joint = tuple(cfg.lr_joint_schedule)
    solo = (cfg.lr_individual,)
    report = trainer.report
    try:
        params, _ = trainer.run_phase(params, linear_names(0), 0, "linear", solo, "t0.s1")
        params, _ = trainer.run_phase(params, shrink_names(kind, 0), 0, "nonlinear", solo, "t0.s2")
        params, val_loss = trainer.run_phase(params, layer_names(kind, 0), 0, "nonlinear", joint, "t0.s3")
        report.subprocedure_val_loss.append(val_loss)
        for t in range(1, n_layers):
            for src, dst in zip(layer_names(kind, t - 1), layer_names(kind, t)):
                params[dst] = np.array(params[src], copy=True)
            older = [name for k in range(t) for name in layer_names(kind, k)]
            params, _ = trainer.run_phase(params, linear_names(t), t, "linear", solo, f"t{t}.s5")
            params, _ = trainer.run_phase(params, older + linear_names(t), t, "linear", joint,
                                          f"t{t}.s6")
            params, _ = trainer.run_phase(params, shrink_names(kind, t), t, "nonlinear", solo,
                                          f"t{t}.s7")
            params, val_loss = trainer.run_phase(params, older + layer_names(kind, t), t,
                                                 "nonlinear", joint, f"t{t}.s8")
            report.subprocedure_val_loss.append(val_loss)
    except FloatingPointError as exc:
        report.aborted = str(exc)
        report.wall_seconds = time.perf_counter() - start
        raise TrainingDiverged(str(exc), report) from exc
    report.wall_seconds = time.perf_counter() - start
    trained = len(report.subprocedure_val_loss)
    return params_to_network(params, kind, trained), report


class TrainingDiverged(FloatingPointError):
    def __init__(self, message, report):
        super().__init__(message)
        self.report = report


# -- dual-SNR training ----------------------------------------------------------


class SnrDispatcher:
    """Pick a network by test SNR: below ``split_db`` the low-SNR net, otherwise the high one.

    SNRs outside ``[low_range[0], high_range[1]]`` go to the nearest range
    with a logged warning.
    """

    def __init__(self, low, high, split_db=10.0, low_range=(0.0, 10.0), high_range=(10.0, 20.0)):
        self.low = low
        self.high = high
        self.split_db = split_db
        self.low_range = low_range
        self.high_range = high_range

    def select(self, snr_db):
        if snr_db < self.low_range[0] or snr_db > self.high_range[1]:
            logger.warning("test SNR %.3g dB is outside both training ranges", snr_db)
        return self.low if snr_db < self.split_db else self.high


def dual_snr_training(sys, channels, kind, n_layers, cfg=None, train_size=20000, val_size=2000,
                      ranges=((0.0, 10.0), (10.0, 20.0)), rng=None):
    """Train one network per SNR range.

    ``channels`` is a callable ``(count, rng) -> (count, N)`` beamspace
    generator or a fixed (D, N) array reused by both ranges.
    """
    cfg = cfg or TrainConfig()
    rng = check_random_state(rng)
    nets, reports = [], []
    for lo, hi in ranges:
        policy = SnrPolicy.range(lo, hi)
        train = build_dataset(channels, sys, policy, train_size, rng)
        val = build_dataset(channels, sys, policy, val_size, rng)
        net, report = train_layer_by_layer(sys, train, val, kind, n_layers, cfg)
        nets.append(net)
        reports.append(report)
    dispatcher = SnrDispatcher(nets[0], nets[1], split_db=ranges[1][0],
                               low_range=ranges[0], high_range=ranges[1])
    return dispatcher, reports
