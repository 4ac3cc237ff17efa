"""Element-wise shrinkage functions and their Wirtinger derivatives.

Everything here broadcasts over numpy arrays of complex inputs ``r``.  The
Gaussian-mixture functions broadcast ``r`` against an extra trailing axis of
length ``Nc`` internally, so ``r`` may have any shape.

Complex Gaussian densities use ``CN(x; mu, s) = exp(-|x - mu|^2 / s) / (pi s)``,
with ``s = E|x - mu|^2``.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, softmax

BOUNDARY_TOL = 1e-12
LOG_VAR_FLOOR = np.log(1e-6)


@dataclass(frozen=True)
class SoftThresholdParams:
    lam: float

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError(f"lambda must be non-negative, got {self.lam}")


@dataclass(frozen=True)
class GmParams:
    """Gaussian-mixture prior stored as unconstrained values.

    Mixture weights are the normalized exponentials of ``weights_raw`` and
    variances are ``exp(log_vars)``, so any real values are valid.
    """

    weights_raw: np.ndarray
    means: np.ndarray
    log_vars: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights_raw, dtype=float).reshape(-1)
        mu = np.array(self.means, dtype=np.complex128).reshape(-1)
        lv = np.array(self.log_vars, dtype=float).reshape(-1)
        if not (w.size == mu.size == lv.size) or w.size == 0:
            raise ValueError("GM parameter arrays must share a non-zero length")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(mu)) and np.all(np.isfinite(lv))):
            raise ValueError("GM parameters must be finite")
        object.__setattr__(self, "weights_raw", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "log_vars", lv)

    @property
    def nc(self):
        return self.weights_raw.size

    @property
    def weights(self):
        return softmax(self.weights_raw)

    @property
    def variances(self):
        return np.exp(self.log_vars)

    @classmethod
    def from_moments(cls, weights, means, variances, var_floor=1e-6):
        weights = np.asarray(weights, dtype=float)
        if np.any(weights <= 0):
            raise ValueError("mixture weights must be positive")
        variances = np.maximum(np.asarray(variances, dtype=float), var_floor)
        return cls(np.log(weights / weights.sum()), means, np.log(variances))

    @classmethod
    def initial(cls, nc=4, log_var=LOG_VAR_FLOOR):
        """Equal weights, zero means and near-zero variances (a near-spike prior at 0)."""
        lv = np.broadcast_to(np.asarray(log_var, dtype=float), (nc,)).copy()
        return cls(np.zeros(nc), np.zeros(nc, dtype=complex), lv)


def fit_circular_gm(samples, nc=4, iterations=200, var_floor=1e-6):
    """Zero-mean circular mixture fitted to complex samples by EM.

    Each component is ``CN(0, v_k)``, so only ``|x|^2`` matters.  Starts from
    variances spread log-uniformly over the sample energy range.
    """
    x = np.abs(np.asarray(samples, dtype=np.complex128).ravel()) ** 2
    if x.size == 0:
        raise ValueError("no samples to fit")
    top = max(float(np.max(x)), var_floor)
    bottom = max(float(np.mean(x)) * 1e-3, var_floor)
    var = np.geomspace(bottom, max(top, bottom), nc)
    weights = np.full(nc, 1.0 / nc)
    for _ in range(iterations):
        # components on the leading axis keep the reductions contiguous
        log_r = (np.log(weights) - np.log(var))[:, None] - x / var[:, None]
        resp = softmax(log_r, axis=0)
        mass = resp.sum(axis=1)
        weights = np.maximum(mass / x.size, 1e-12)
        var = np.maximum(resp @ x / np.maximum(mass, 1e-300), var_floor)
    return GmParams.from_moments(weights, np.zeros(nc), var, var_floor=var_floor)


@dataclass
class ShrinkDerivs:
    """Shrinkage output with its derivatives with respect to ``r`` and ``conj(r)``."""

    value: np.ndarray
    d_r: np.ndarray
    d_rconj: np.ndarray


# -- soft threshold ---------------------------------------------------------


def _threshold(lam, sigma2):
    lam = np.asarray(lam, dtype=float)
    sigma2 = np.asarray(sigma2, dtype=float)
    if np.any(lam < 0):
        raise ValueError("lambda must be non-negative")
    if np.any(sigma2 < 0):
        raise ValueError("sigma2 must be non-negative")
    return lam * np.sqrt(sigma2)


def soft_threshold(r, lam, sigma2):
    """``max(|r| - lam * sqrt(sigma2), 0) * exp(j arg r)``."""
    r = np.asarray(r, dtype=np.complex128)
    tau = _threshold(lam, sigma2)
    mag = np.abs(r)
    alive = mag > tau
    scale = np.where(alive, 1.0 - tau / np.where(alive, mag, 1.0), 0.0)
    return scale * r


def soft_threshold_derivs(r, lam, sigma2, strict=True):
    """Soft threshold and its Wirtinger derivatives.

    Outside the dead zone, ``eta = (1 - tau/|r|) r`` gives
    ``d eta/d r = 1 - tau / (2|r|)`` and ``d eta/d r* = tau r^2 / (2 |r|^3)``.
    With ``strict`` a point within ``BOUNDARY_TOL`` of ``|r| = tau`` raises;
    otherwise such points are treated as inside the dead zone.
    """
    r = np.asarray(r, dtype=np.complex128)
    tau = _threshold(lam, sigma2)
    mag = np.abs(r)
    if strict and np.any((np.abs(mag - tau) < BOUNDARY_TOL) & (tau > 0)):
        raise ValueError("soft threshold is not differentiable at |r| = tau")
    alive = mag > tau
    safe = np.where(alive, mag, 1.0)
    value = np.where(alive, 1.0 - tau / safe, 0.0) * r
    d_r = np.where(alive, 1.0 - tau / (2.0 * safe), 0.0)
    d_rconj = np.where(alive, tau * r * r / (2.0 * safe**3), 0.0)
    return ShrinkDerivs(value, d_r.astype(np.complex128), d_rconj)


# -- Gaussian mixture -------------------------------------------------------


def _gm_terms(r, weights, means, variances, sigma2):
    sigma2 = np.asarray(sigma2, dtype=float)
    if np.any(sigma2 <= 0):
        raise ValueError("sigma2 must be positive for the Gaussian-mixture shrinkage")
    r = np.asarray(r, dtype=np.complex128)[..., None]
    sigma2 = sigma2[..., None]
    s = sigma2 + variances
    diff = r - means
    log_w = np.log(weights) - np.log(np.pi * s) - (diff.real**2 + diff.imag**2) / s
    post = softmax(log_w, axis=-1)
    mu_tilde = (sigma2 * means + variances * r) / s
    return r, s, diff, post, mu_tilde


def gm_posterior_mean(r, weights, means, variances, sigma2):
    """Posterior mean of ``h`` given ``r = h + CN(0, sigma2)`` under a GM prior.

    Works on effective moments directly, so zero variances (spikes) are allowed.
    """
    weights = np.asarray(weights, dtype=float)
    means = np.asarray(means, dtype=np.complex128)
    variances = np.asarray(variances, dtype=float)
    _, _, _, post, mu_tilde = _gm_terms(r, weights, means, variances, sigma2)
    return np.sum(post * mu_tilde, axis=-1)


def gm_posterior_mean_derivs(r, weights, means, variances, sigma2):
    weights = np.asarray(weights, dtype=float)
    means = np.asarray(means, dtype=np.complex128)
    variances = np.asarray(variances, dtype=float)
    _, s, diff, post, mu_tilde = _gm_terms(r, weights, means, variances, sigma2)
    value = np.sum(post * mu_tilde, axis=-1)
    gain = variances / s
    # d log w_k / d r = -conj(r - mu_k) / s_k, d log w_k / d r* = -(r - mu_k) / s_k
    a = -np.conj(diff) / s
    b = -diff / s
    a_bar = np.sum(post * a, axis=-1, keepdims=True)
    b_bar = np.sum(post * b, axis=-1, keepdims=True)
    d_r = np.sum(post * gain, axis=-1) + np.sum(post * mu_tilde * (a - a_bar), axis=-1)
    d_rconj = np.sum(post * mu_tilde * (b - b_bar), axis=-1)
    return ShrinkDerivs(value, d_r, d_rconj)


def gm_shrinkage(r, theta, sigma2):
    """MMSE shrinkage of ``r`` under the mixture prior ``theta`` at noise level ``sigma2``."""
    return gm_posterior_mean(r, theta.weights, theta.means, theta.variances, sigma2)


def gm_shrinkage_derivs(r, theta, sigma2):
    return gm_posterior_mean_derivs(r, theta.weights, theta.means, theta.variances, sigma2)


def _moments(theta):
    if isinstance(theta, GmParams):
        return theta.weights, theta.means, theta.variances
    weights, means, variances = theta
    return (
        np.asarray(weights, dtype=float),
        np.asarray(means, dtype=np.complex128),
        np.asarray(variances, dtype=float),
    )


def gm_posterior_oracle(r, theta, sigma2, points=401, span=8.0):
    """Posterior mean by brute-force 2-D quadrature over the complex plane.

    ``theta`` is a ``GmParams`` or a ``(weights, means, variances)`` tuple.
    Each mixture component gets its own ``points x points`` grid covering
    ``+-span`` posterior standard deviations (per real axis) around the
    component's posterior centre; the integrand ``p_k CN(r; h, sigma2)
    CN(h; mu_k, var_k)`` is evaluated as written.  Components with zero
    variance are point masses and are integrated exactly.  Test-only.
    """
    weights, means, variances = _moments(theta)
    r = complex(r)
    sigma2 = float(sigma2)
    if sigma2 <= 0:
        raise ValueError("sigma2 must be positive")
    u = np.linspace(-span, span, points)
    log_mass = []
    mean = []
    for p, mu, var in zip(weights, means, variances):
        if var == 0.0:
            d = r - mu
            log_mass.append(np.log(p) - np.log(np.pi * sigma2) - (d.real**2 + d.imag**2) / sigma2)
            mean.append(mu)
            continue
        post_var = sigma2 * var / (sigma2 + var)
        centre = (sigma2 * mu + var * r) / (sigma2 + var)
        step = np.sqrt(post_var / 2.0)
        xs = centre.real + step * u
        ys = centre.imag + step * u
        h = xs[None, :] + 1j * ys[:, None]
        dr = r - h
        dh = h - mu
        log_f = (
            np.log(p)
            - np.log(np.pi * sigma2)
            - (dr.real**2 + dr.imag**2) / sigma2
            - np.log(np.pi * var)
            - (dh.real**2 + dh.imag**2) / var
        )
        peak = log_f.max()
        f = np.exp(log_f - peak)
        # trapezoid weights on the square grid
        wt = np.ones(points)
        wt[0] = wt[-1] = 0.5
        f = f * wt[None, :] * wt[:, None]
        area = step * step * (u[1] - u[0]) ** 2
        total = f.sum()
        log_mass.append(peak + np.log(total * area))
        mean.append(np.sum(f * h) / total)
    log_mass = np.array(log_mass)
    resp = np.exp(log_mass - logsumexp(log_mass))
    return complex(np.sum(resp * np.array(mean)))
