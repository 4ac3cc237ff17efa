"""Saleh-Valenzuela channels for lens antenna arrays and their beamspace view."""

import enum
import functools
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._validation import check_positive_int, check_random_state

CHANNEL_MAGIC = b"BSCH"
_CHANNEL_HEADER = struct.Struct("<4sII")


class ArrayKind(str, enum.Enum):
    ULA = "ULA"
    UPA = "UPA"


@dataclass(frozen=True)
class ArrayGeometry:
    """Antenna array layout.

    ``n`` is the element count for a ULA and the ``(n1, n2)`` pair for a UPA,
    where ``n2`` (elevation) is the fast index of the flattened array.
    """

    kind: ArrayKind
    n: object
    spacing_over_lambda: float = 0.5

    def __post_init__(self):
        kind = ArrayKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind is ArrayKind.ULA:
            object.__setattr__(self, "n", check_positive_int(self.n, "n"))
        else:
            try:
                n1, n2 = self.n
            except (TypeError, ValueError):
                raise ValueError("UPA geometry needs n=(n1, n2)") from None
            shape = (check_positive_int(n1, "n1"), check_positive_int(n2, "n2"))
            object.__setattr__(self, "n", shape)
        if not self.spacing_over_lambda > 0:
            raise ValueError("spacing_over_lambda must be positive")

    @classmethod
    def ula(cls, n, spacing_over_lambda=0.5):
        return cls(ArrayKind.ULA, n, spacing_over_lambda)

    @classmethod
    def upa(cls, n1, n2, spacing_over_lambda=0.5):
        return cls(ArrayKind.UPA, (n1, n2), spacing_over_lambda)

    @property
    def num_antennas(self):
        if self.kind is ArrayKind.ULA:
            return self.n
        return self.n[0] * self.n[1]


@dataclass(frozen=True)
class PathParams:
    gain: complex
    azimuth_rad: float
    elevation_rad: float = 0.0

    def __post_init__(self):
        for angle in (self.azimuth_rad, self.elevation_rad):
            if not -np.pi / 2 < angle < np.pi / 2:
                raise ValueError(f"path angle {angle} outside (-pi/2, pi/2)")


@dataclass
class ChannelSample:
    spatial: np.ndarray
    beamspace: np.ndarray
    geometry: ArrayGeometry
    paths: list = field(default_factory=list)


def _phase_ramp(n, spatial_angle):
    return np.exp(-2j * np.pi * spatial_angle * np.arange(n))


def steering_ula(geometry, theta_rad):
    """Unit-norm ULA response ``exp(-j 2 pi (d/lambda) sin(theta) i) / sqrt(N)``."""
    if geometry.kind is not ArrayKind.ULA:
        raise ValueError("steering_ula needs a ULA geometry")
    n = geometry.n
    psi = geometry.spacing_over_lambda * np.sin(theta_rad)
    return _phase_ramp(n, psi) / np.sqrt(n)


def steering_upa(geometry, azi_rad, ele_rad):
    """Unit-norm UPA response; the elevation ramp is the fast index."""
    if geometry.kind is not ArrayKind.UPA:
        raise ValueError("steering_upa needs a UPA geometry")
    n1, n2 = geometry.n
    d = geometry.spacing_over_lambda
    psi_azi = d * np.sin(azi_rad) * np.sin(ele_rad)
    psi_ele = d * np.cos(ele_rad)
    return np.kron(_phase_ramp(n1, psi_azi), _phase_ramp(n2, psi_ele)) / np.sqrt(n1 * n2)


def steering(geometry, path):
    if geometry.kind is ArrayKind.ULA:
        return steering_ula(geometry, path.azimuth_rad)
    return steering_upa(geometry, path.azimuth_rad, path.elevation_rad)


def beam_grid(n):
    """Spatial directions ``(k - (n + 1) / 2) / n`` for k = 1..n covered by the lens."""
    return (np.arange(1, n + 1) - (n + 1) / 2) / n


def _dft_rows(n):
    # row k is the conjugate transpose of the unit-spacing response at grid point k
    return np.exp(2j * np.pi * np.outer(beam_grid(n), np.arange(n))) / np.sqrt(n)


def lens_matrix(geometry):
    """Spatial-DFT matrix ``U`` mapping spatial channels to the beamspace."""
    return _lens_matrix(geometry).copy()


@functools.lru_cache(maxsize=16)
def _lens_matrix(geometry):
    if geometry.kind is ArrayKind.ULA:
        u = _dft_rows(geometry.n)
    else:
        n1, n2 = geometry.n
        u = np.kron(_dft_rows(n1), _dft_rows(n2))
    u.setflags(write=False)
    return u


def to_beamspace(geometry, spatial):
    """Beamspace image ``U h`` of one channel or of the rows of a 2-D array."""
    spatial = np.asarray(spatial, dtype=np.complex128)
    u = _lens_matrix(geometry)
    if spatial.shape[-1] != u.shape[0]:
        raise ValueError(
            f"channel length {spatial.shape[-1]} does not match N={u.shape[0]}"
        )
    return spatial @ u.T


def _uniform_open(rng, low, high, size):
    out = rng.uniform(low, high, size)
    bad = out <= low
    while np.any(bad):
        out[bad] = rng.uniform(low, high, int(bad.sum()))
        bad = out <= low
    return out


def sample_sv_channel(geometry, num_paths, rng=None):
    """Draw one Saleh-Valenzuela channel with ``num_paths`` paths.

    Gains are CN(0, 1) and every angle is uniform on (-pi/2, pi/2).
    """
    num_paths = check_positive_int(num_paths, "num_paths")
    rng = check_random_state(rng)
    n = geometry.num_antennas
    gains = (rng.standard_normal(num_paths) + 1j * rng.standard_normal(num_paths)) / np.sqrt(2)
    azi = _uniform_open(rng, -np.pi / 2, np.pi / 2, num_paths)
    if geometry.kind is ArrayKind.UPA:
        ele = _uniform_open(rng, -np.pi / 2, np.pi / 2, num_paths)
    else:
        ele = np.zeros(num_paths)
    paths = [PathParams(complex(g), float(a), float(e)) for g, a, e in zip(gains, azi, ele)]
    return channel_from_paths(geometry, paths)


def channel_from_paths(geometry, paths):
    n = geometry.num_antennas
    spatial = np.zeros(n, dtype=np.complex128)
    for path in paths:
        spatial += path.gain * steering(geometry, path)
    spatial *= np.sqrt(n / len(paths))
    return ChannelSample(spatial, to_beamspace(geometry, spatial), geometry, list(paths))


def sample_sv_channels(geometry, num_paths, count, rng=None):
    """Stack ``count`` draws into (spatial, beamspace) arrays of shape (count, N)."""
    rng = check_random_state(rng)
    samples = [sample_sv_channel(geometry, num_paths, rng) for _ in range(count)]
    if not samples:
        n = geometry.num_antennas
        return np.zeros((0, n), complex), np.zeros((0, n), complex)
    return np.stack([s.spatial for s in samples]), np.stack([s.beamspace for s in samples])


def dirichlet_kernel(x, n):
    """``(1/n) sum_i exp(j 2 pi x i)`` over i = 0..n-1, evaluated in closed form.

    The magnitude is ``|sin(n pi x) / (n sin(pi x))|``, which is close to
    ``sin(n pi x) / (n pi x)`` for small ``x``; the linear phase
    ``exp(j pi (n - 1) x)`` is kept so the result is exact.
    """
    x = np.asarray(x, dtype=float)
    den = n * np.sin(np.pi * x)
    on_pole = np.abs(den) < 1e-13
    safe = np.where(on_pole, 1.0, den)
    mag = np.where(on_pole, 1.0, np.sin(n * np.pi * x) / safe)
    # at integer x the limit of sin(n pi x)/(n sin pi x) is (-1)^(x (n-1)),
    # which the phase factor below cancels
    k = np.rint(x)
    mag = np.where(on_pole, np.cos(np.pi * k * (n - 1)), mag)
    return mag * np.exp(1j * np.pi * (n - 1) * x)


def beamspace_element_closed_form(geometry, paths, n_index):
    """Entry ``n_index`` of the beamspace channel computed path by path."""
    if geometry.kind is not ArrayKind.ULA:
        raise ValueError("the closed form is defined for ULA geometries only")
    if not np.isclose(geometry.spacing_over_lambda, 0.5):
        raise ValueError("the closed form assumes half-wavelength spacing")
    n = geometry.n
    if not 0 <= n_index < n:
        raise IndexError(f"beam index {n_index} outside 0..{n - 1}")
    if not paths:
        return 0j
    grid = beam_grid(n)[n_index]
    total = 0j
    for path in paths:
        psi = geometry.spacing_over_lambda * np.sin(path.azimuth_rad)
        total += path.gain * complex(dirichlet_kernel(grid - psi, n))
    return np.sqrt(n / len(paths)) * total


def write_external_channels(path, spatial):
    """Write spatial channels (rows of a 2-D complex array) in the binary channel format."""
    spatial = np.atleast_2d(np.asarray(spatial, dtype=np.complex128))
    count, n = spatial.shape
    payload = np.empty((count, n, 2), dtype="<f8")
    payload[..., 0] = spatial.real
    payload[..., 1] = spatial.imag
    with open(path, "wb") as fh:
        fh.write(_CHANNEL_HEADER.pack(CHANNEL_MAGIC, n, count))
        fh.write(payload.tobytes())


class ChannelFileError(ValueError):
    """Malformed channel file; ``record`` names the first unreadable record."""

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record


def import_external_channels(path, geometry):
    """Read pre-generated spatial channels and attach their beamspace images."""
    path = Path(path)
    raw = path.read_bytes()
    if not raw:
        return []
    if len(raw) < _CHANNEL_HEADER.size:
        raise ChannelFileError(f"{path}: truncated header")
    magic, n, count = _CHANNEL_HEADER.unpack_from(raw)
    if magic != CHANNEL_MAGIC:
        raise ChannelFileError(f"{path}: bad magic {magic!r}")
    if n != geometry.num_antennas:
        raise ValueError(
            f"{path}: records have N={n}, geometry expects N={geometry.num_antennas}"
        )
    record_bytes = 16 * n
    body = raw[_CHANNEL_HEADER.size:]
    complete = len(body) // record_bytes
    if complete < count:
        raise ChannelFileError(
            f"{path}: record {complete} is short "
            f"({len(body) - complete * record_bytes} of {record_bytes} bytes)",
            record=complete,
        )
    if len(body) != count * record_bytes:
        raise ChannelFileError(f"{path}: {len(body) - count * record_bytes} trailing bytes")
    data = np.frombuffer(body, dtype="<f8").reshape(count, n, 2)
    spatial = data[..., 0] + 1j * data[..., 1]
    if not np.all(np.isfinite(spatial)):
        bad = int(np.flatnonzero(~np.isfinite(spatial).all(axis=1))[0])
        raise ChannelFileError(f"{path}: record {bad} has non-finite values", record=bad)
    beams = to_beamspace(geometry, spatial)
    return [ChannelSample(spatial[i].copy(), beams[i].copy(), geometry, []) for i in range(count)]
