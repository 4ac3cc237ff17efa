"""Beam-selection sensing matrix, noisy pilot measurements, dataset files."""

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._validation import check_positive_int, check_random_state

DATASET_MAGIC = b"BSDS"
_DATASET_HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True)
class SensingSystem:
    """Real M x N selection matrix with entries +-1/sqrt(M)."""

    a: np.ndarray
    noise_var: float = 0.0

    def __post_init__(self):
        a = np.array(self.a, dtype=float)
        if a.ndim != 2:
            raise ValueError("selection matrix must be 2-D")
        m, n = a.shape
        if m > n:
            raise ValueError(f"need m <= n, got m={m}, n={n}")
        if not np.all(np.abs(a) == 1.0 / np.sqrt(m)):
            raise ValueError("selection matrix entries must be exactly +-1/sqrt(M)")
        a.setflags(write=False)
        object.__setattr__(self, "a", a)

    @property
    def m(self):
        return self.a.shape[0]

    @property
    def n(self):
        return self.a.shape[1]


def gen_sensing(n, m, rng=None):
    n = check_positive_int(n, "n")
    m = check_positive_int(m, "m")
    if m > n:
        raise ValueError(f"need m <= n, got m={m}, n={n}")
    rng = check_random_state(rng)
    signs = rng.integers(0, 2, size=(m, n)) * 2 - 1
    return SensingSystem(signs / np.sqrt(m))


def snr_to_noise_var(snr_db):
    return 10.0 ** (-np.asarray(snr_db, dtype=float) / 10.0)


def measure(sys, hbeam, snr_db, rng=None):
    """Pilot measurements ``A (h + n)`` with ``n ~ CN(0, 10^(-snr/10) I_N)``.

    ``hbeam`` may hold one channel or one channel per row; ``snr_db`` is a
    scalar or one value per row.  ``snr_db = inf`` gives noiseless output.
    """
    h = np.asarray(hbeam, dtype=np.complex128)
    if h.shape[-1] != sys.n:
        raise ValueError(f"channel length {h.shape[-1]} does not match N={sys.n}")
    rng = check_random_state(rng)
    noise_var = snr_to_noise_var(snr_db)
    if h.ndim == 2:
        noise_var = np.broadcast_to(noise_var, (h.shape[0],))[:, None]
    elif noise_var.ndim != 0:
        raise ValueError("a single channel takes a scalar SNR")
    raw = rng.standard_normal(h.shape) + 1j * rng.standard_normal(h.shape)
    noise = raw * np.sqrt(noise_var / 2.0)
    return (h + noise) @ sys.a.T


@dataclass
class MeasurementBatch:
    """Measurements ``y`` (D x M), noiseless beamspace labels (D x N), per-sample SNR."""

    y: np.ndarray
    truth: np.ndarray
    snr_db: np.ndarray

    def __post_init__(self):
        if not len(self.y) == len(self.truth) == len(self.snr_db):
            raise ValueError("y, truth and snr_db must have equal length")

    def __len__(self):
        return len(self.y)

    def subset(self, index):
        return MeasurementBatch(self.y[index], self.truth[index], self.snr_db[index])


@dataclass(frozen=True)
class SnrPolicy:
    """Per-sample SNR: a single value (``high is None``) or uniform in dB on [low, high]."""

    low: float
    high: float = None

    @classmethod
    def single(cls, db):
        return cls(float(db))

    @classmethod
    def range(cls, lo_db, hi_db):
        if hi_db < lo_db:
            raise ValueError("SNR range upper bound below lower bound")
        return cls(float(lo_db), float(hi_db))

    def draw(self, count, rng):
        if self.high is None:
            return np.full(count, self.low)
        return rng.uniform(self.low, self.high, count)


def build_dataset(channels, sys, snr_policy, count=None, rng=None):
    """Measure ``count`` beamspace channels under ``snr_policy``.

    ``channels`` is a (D, N) array of beamspace channels or a callable
    ``(count, rng) -> (count, N) array`` that generates them on demand.
    """
    rng = check_random_state(rng)
    if callable(channels):
        count = check_positive_int(count, "count")
        truth = np.asarray(channels(count, rng), dtype=np.complex128)
    else:
        truth = np.atleast_2d(np.asarray(channels, dtype=np.complex128))
        if truth.size == 0:
            raise ValueError("empty channel source")
        if count is not None:
            count = check_positive_int(count, "count")
            truth = truth[np.arange(count) % len(truth)]
    if len(truth) == 0:
        raise ValueError("empty channel source")
    snr = snr_policy.draw(len(truth), rng)
    y = measure(sys, truth, snr, rng)
    return MeasurementBatch(y, truth, snr)


def _complex_to_pairs(x):
    out = np.empty(x.shape + (2,), dtype="<f8")
    out[..., 0] = x.real
    out[..., 1] = x.imag
    return out


def save_dataset(path, batch):
    d, m = batch.y.shape
    n = batch.truth.shape[1]
    rows = np.concatenate(
        [
            _complex_to_pairs(batch.y).reshape(d, 2 * m),
            _complex_to_pairs(batch.truth).reshape(d, 2 * n),
            np.asarray(batch.snr_db, dtype="<f8").reshape(d, 1),
        ],
        axis=1,
    ).astype("<f8")
    with open(path, "wb") as fh:
        fh.write(_DATASET_HEADER.pack(DATASET_MAGIC, n, m, d))
        fh.write(rows.tobytes())


def load_dataset(path):
    raw = Path(path).read_bytes()
    if len(raw) < _DATASET_HEADER.size:
        raise ValueError(f"{path}: truncated dataset header")
    magic, n, m, d = _DATASET_HEADER.unpack_from(raw)
    if magic != DATASET_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    width = 2 * m + 2 * n + 1
    body = raw[_DATASET_HEADER.size:]
    if len(body) != 8 * width * d:
        raise ValueError(f"{path}: expected {d} samples of {8 * width} bytes")
    rows = np.frombuffer(body, dtype="<f8").reshape(d, width)
    y = rows[:, 0:2 * m:2] + 1j * rows[:, 1:2 * m:2]
    h = rows[:, 2 * m:2 * m + 2 * n:2] + 1j * rows[:, 2 * m + 1:2 * m + 2 * n:2]
    return MeasurementBatch(y.copy(), h.copy(), rows[:, -1].copy())


def save_sensing(path, sys):
    np.save(path, np.sign(sys.a).astype(np.int8))


def load_sensing(path):
    signs = np.load(path).astype(float)
    return SensingSystem(signs / np.sqrt(signs.shape[0]))
