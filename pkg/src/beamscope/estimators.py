"""Sparse beamspace recovery: complex AMP, unfolded LAMP / GM-LAMP, and OMP.

All forward passes take measurements as a length-M vector or a (D, M) batch
and return estimates of matching leading shape.  Per-sample noise levels are
re-estimated from the residual at every layer.
"""

import enum
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from .shrinkage import (
    GmParams,
    SoftThresholdParams,
    gm_shrinkage_derivs,
    soft_threshold_derivs,
)

PAPER_AMP_LAMBDA = 1.1402
SIGMA2_FLOOR = 1e-30

# complex multiplies per element (per element and component for the mixture)
SOFT_THRESHOLD_COST = 3
GM_COMPONENT_COST = 10


class NetworkKind(str, enum.Enum):
    LAMP = "LAMP"
    GMLAMP = "GMLAMP"


@dataclass(frozen=True)
class AmpConfig:
    iterations: int = 10
    lam: float = PAPER_AMP_LAMBDA

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("AMP needs at least one iteration")
        if not self.lam >= 0:
            raise ValueError("lambda must be non-negative")


@dataclass
class LayerParams:
    b: np.ndarray
    shrink: object

    def copy(self):
        return LayerParams(self.b.copy(), self.shrink)


@dataclass
class UnfoldedNetwork:
    kind: NetworkKind
    layers: list

    def __post_init__(self):
        self.kind = NetworkKind(self.kind)
        if not self.layers:
            raise ValueError("an unfolded network needs at least one layer")
        shape = self.layers[0].b.shape
        want = SoftThresholdParams if self.kind is NetworkKind.LAMP else GmParams
        for t, layer in enumerate(self.layers):
            if layer.b.shape != shape:
                raise ValueError(f"layer {t} has B of shape {layer.b.shape}, expected {shape}")
            if not isinstance(layer.shrink, want):
                raise TypeError(f"layer {t} of a {self.kind.value} network needs {want.__name__}")

    @property
    def n_layers(self):
        return len(self.layers)

    @property
    def n(self):
        return self.layers[0].b.shape[0]

    @property
    def m(self):
        return self.layers[0].b.shape[1]

    @property
    def nc(self):
        if self.kind is NetworkKind.GMLAMP:
            return self.layers[0].shrink.nc
        return 0

    def prefix(self, t):
        """The first ``t`` layers as a network of their own."""
        return UnfoldedNetwork(self.kind, [layer.copy() for layer in self.layers[:t]])

    def copy(self):
        return self.prefix(self.n_layers)

    @classmethod
    def from_sensing(cls, sys, kind, n_layers, shrink):
        b = sys.a.T.astype(np.complex128)
        return cls(kind, [LayerParams(b.copy(), shrink) for _ in range(n_layers)])


@dataclass
class LayerTrace:
    r: list = field(default_factory=list)
    estimates: list = field(default_factory=list)
    residuals: list = field(default_factory=list)
    sigma2: list = field(default_factory=list)
    onsager_b: list = field(default_factory=list)
    onsager_c: list = field(default_factory=list)


class OpCounter:
    """Tallies complex multiplies for one measurement vector."""

    def __init__(self):
        self.multiplies = 0

    def matvec(self, rows, cols):
        self.multiplies += rows * cols

    def add(self, count):
        self.multiplies += int(count)


def _as_batch(y, m):
    y = np.asarray(y, dtype=np.complex128)
    single = y.ndim == 1
    y2 = np.atleast_2d(y)
    if y2.ndim != 2 or y2.shape[1] != m:
        raise ValueError(f"measurements must have length M={m}, got shape {y.shape}")
    return y2, single


def _residual_power(v):
    return np.maximum(np.mean(v.real**2 + v.imag**2, axis=-1), SIGMA2_FLOOR)


def _soft_shrink(r, shrink, sigma2):
    return soft_threshold_derivs(r, shrink.lam, sigma2[:, None], strict=False)


def _gm_shrink(r, shrink, sigma2):
    return gm_shrinkage_derivs(r, shrink, sigma2[:, None])


def _shrink_cost(net_kind, n, nc):
    if net_kind is NetworkKind.LAMP:
        return SOFT_THRESHOLD_COST * n
    return GM_COMPONENT_COST * nc * n


def amp_estimate(sys, y, cfg=AmpConfig(), counter=None):
    """Complex AMP with soft-threshold shrinkage and both Onsager terms."""
    a = sys.a
    m, n = a.shape
    y2, single = _as_batch(y, m)
    d = y2.shape[0]
    h = np.zeros((d, n), dtype=np.complex128)
    v_prev = np.zeros((d, m), dtype=np.complex128)
    b = np.zeros((d, 1), dtype=np.complex128)
    c = np.zeros((d, 1), dtype=np.complex128)
    trace = LayerTrace()
    shrink = SoftThresholdParams(cfg.lam)
    for _ in range(cfg.iterations):
        v = y2 - h @ a.T + b * v_prev + c * np.conj(v_prev)
        sigma2 = _residual_power(v)
        r = h + v @ a
        out = _soft_shrink(r, shrink, sigma2)
        h = out.value
        b = np.sum(out.d_r, axis=1, keepdims=True) / m
        c = np.sum(out.d_rconj, axis=1, keepdims=True) / m
        v_prev = v
        if counter is not None:
            counter.matvec(m, n)
            counter.add(2 * m)
            counter.matvec(n, m)
            counter.add(SOFT_THRESHOLD_COST * n)
        trace.residuals.append(v)
        trace.sigma2.append(sigma2)
        trace.r.append(r)
        trace.estimates.append(h)
        trace.onsager_b.append(b[:, 0])
        trace.onsager_c.append(c[:, 0])
    return (h[0] if single else h), trace


def _unfolded_forward(sys, y, net, counter):
    a = sys.a
    m, n = a.shape
    if net.m != m or net.n != n:
        raise ValueError(f"network is {net.n}x{net.m}, sensing system is {n}x{m}")
    shrink_fn = _soft_shrink if net.kind is NetworkKind.LAMP else _gm_shrink
    y2, single = _as_batch(y, m)
    h = np.zeros((y2.shape[0], n), dtype=np.complex128)
    v = y2.copy()
    trace = LayerTrace()
    for layer in net.layers:
        sigma2 = _residual_power(v)
        r = h + v @ layer.b.T
        out = shrink_fn(r, layer.shrink, sigma2)
        h = out.value
        b = np.sum(out.d_r, axis=1, keepdims=True) / m
        c = np.sum(out.d_rconj, axis=1, keepdims=True) / m
        v = y2 - h @ a.T + b * v + c * np.conj(v)
        if counter is not None:
            counter.matvec(n, m)
            counter.add(_shrink_cost(net.kind, n, net.nc))
            counter.matvec(m, n)
            counter.add(2 * m)
        trace.sigma2.append(sigma2)
        trace.r.append(r)
        trace.estimates.append(h)
        trace.residuals.append(v)
        trace.onsager_b.append(b[:, 0])
        trace.onsager_c.append(c[:, 0])
    return (h[0] if single else h), trace


def lamp_forward(sys, y, net, counter=None):
    if net.kind is not NetworkKind.LAMP:
        raise ValueError(f"lamp_forward needs a LAMP network, got {net.kind.value}")
    return _unfolded_forward(sys, y, net, counter)


def gmlamp_forward(sys, y, net, counter=None):
    if net.kind is not NetworkKind.GMLAMP:
        raise ValueError(f"gmlamp_forward needs a GMLAMP network, got {net.kind.value}")
    return _unfolded_forward(sys, y, net, counter)


def network_forward(sys, y, net, counter=None):
    return _unfolded_forward(sys, y, net, counter)


def _omp_single(a, y, sparsity, counter):
    m, n = a.shape
    support = []
    x = np.zeros(n, dtype=np.complex128)
    residual = y.copy()
    for s in range(1, sparsity + 1):
        corr = np.abs(a.T @ residual)
        corr[support] = -1.0
        support.append(int(np.argmax(corr)))
        sub = a[:, support]
        gram = sub.T @ sub
        if np.linalg.cond(gram) > 1.0 / np.finfo(float).eps:
            warnings.warn("OMP: selected columns are rank deficient, using pseudo-inverse",
                          RuntimeWarning, stacklevel=3)
            gram_inv = np.linalg.pinv(gram)
        else:
            gram_inv = np.linalg.inv(gram)
        coef = (gram_inv @ sub.T) @ y
        x[:] = 0
        x[support] = coef
        residual = y - a @ x
        if counter is not None:
            counter.matvec(n, m)             # correlation
            counter.add(s * s * m)           # Gram matrix
            counter.add(s**3)                # inverse
            counter.add(s * s * m)           # pseudo-inverse
            counter.add(s * m)               # coefficients
            counter.matvec(m, n)             # residual
    return x


def omp_estimate(sys, y, sparsity, counter=None):
    """Orthogonal matching pursuit with exactly ``sparsity`` greedy steps."""
    a = sys.a
    m, n = a.shape
    if not 1 <= sparsity <= m:
        raise ValueError(f"sparsity must lie in [1, {m}], got {sparsity}")
    y2, single = _as_batch(y, m)
    est = np.stack([_omp_single(a, row, sparsity, counter if i == 0 else None)
                    for i, row in enumerate(y2)])
    return est[0] if single else est


def count_multiplies(kind, n, m, steps, nc=4):
    """Complex multiplies per measurement vector.

    ``steps`` is the iteration / layer count T, or the sparsity S for OMP.
    AMP-type estimators cost ``T (2MN + 2M + per-element shrinkage)``;
    OMP costs ``sum_s (2MN + 2 s^2 M + s^3 + s M)``, i.e. O(SMN) + O(S^3 M).
    """
    kind = str(kind).lower().replace("-", "").replace("_", "")
    if kind in ("amp", "lamp"):
        return steps * (2 * m * n + 2 * m + SOFT_THRESHOLD_COST * n)
    if kind == "gmlamp":
        return steps * (2 * m * n + 2 * m + GM_COMPONENT_COST * nc * n)
    if kind == "omp":
        s = np.arange(1, steps + 1)
        return int(np.sum(2 * m * n + 2 * s * s * m + s**3 + s * m))
    raise ValueError(f"unknown estimator kind {kind!r}")


# -- checkpoints ------------------------------------------------------------

CHECKPOINT_MAGIC = b"BSNT"
CHECKPOINT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sHBIIII")
_KIND_CODES = {NetworkKind.LAMP: 0, NetworkKind.GMLAMP: 1}


def save_network(path, net):
    parts = [_CKPT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, _KIND_CODES[net.kind],
                               net.n_layers, net.n, net.m, net.nc)]
    for layer in net.layers:
        b = np.empty(layer.b.shape + (2,), dtype="<f8")
        b[..., 0] = layer.b.real
        b[..., 1] = layer.b.imag
        parts.append(b.tobytes())
        if net.kind is NetworkKind.LAMP:
            parts.append(np.array([layer.shrink.lam], dtype="<f8").tobytes())
        else:
            th = layer.shrink
            mu = np.stack([th.means.real, th.means.imag], axis=-1)
            parts.append(np.concatenate([th.weights_raw, mu.ravel(), th.log_vars]).astype("<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_network(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _CKPT_HEADER.size:
        raise ValueError(f"{path}: truncated checkpoint header")
    magic, version, code, t, n, m, nc = _CKPT_HEADER.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a network checkpoint")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    kind = {v: k for k, v in _KIND_CODES.items()}[code]
    shrink_len = 1 if kind is NetworkKind.LAMP else 4 * nc
    per_layer = 2 * n * m + shrink_len
    body = np.frombuffer(raw[_CKPT_HEADER.size:], dtype="<f8")
    if body.size != t * per_layer:
        raise ValueError(f"{path}: checkpoint body has {body.size} values, expected {t * per_layer}")
    layers = []
    for k in range(t):
        chunk = body[k * per_layer:(k + 1) * per_layer]
        pairs = chunk[:2 * n * m].reshape(n, m, 2)
        b = pairs[..., 0] + 1j * pairs[..., 1]
        tail = chunk[2 * n * m:]
        if kind is NetworkKind.LAMP:
            shrink = SoftThresholdParams(float(tail[0]))
        else:
            mu = tail[nc:3 * nc].reshape(nc, 2)
            shrink = GmParams(tail[:nc].copy(), mu[:, 0] + 1j * mu[:, 1], tail[3 * nc:].copy())
        layers.append(LayerParams(b, shrink))
    return UnfoldedNetwork(kind, layers)
