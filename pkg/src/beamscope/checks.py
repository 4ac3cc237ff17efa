"""Self-checks of the shrinkage derivatives and network gradients against
brute-force references (quadrature and central finite differences)."""

from dataclasses import dataclass

import numpy as np

from .channel import ArrayGeometry, sample_sv_channels
from .estimators import LayerParams, UnfoldedNetwork, network_forward
from .measurement import SnrPolicy, build_dataset, gen_sensing
from .shrinkage import (
    GmParams,
    SoftThresholdParams,
    gm_posterior_mean,
    gm_posterior_mean_derivs,
    gm_posterior_oracle,
    gm_shrinkage,
    soft_threshold,
    soft_threshold_derivs,
)
from .training import (
    backprop,
    layer_names,
    loss_nonlinear,
    network_to_params,
    params_to_network,
    variable_class,
)


@dataclass
class CheckResult:
    name: str
    worst: float
    tolerance: float

    @property
    def passed(self):
        return bool(self.worst <= self.tolerance)

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: worst {self.worst:.3g} (tolerance {self.tolerance:g})"


def _fd_wirtinger(f, z, h=1e-6):
    fx = (f(z + h) - f(z - h)) / (2 * h)
    fy = (f(z + 1j * h) - f(z - 1j * h)) / (2 * h)
    return 0.5 * (fx - 1j * fy), 0.5 * (fx + 1j * fy)


def _pair_err(analytic, numeric):
    scale = max(max(abs(v) for v in analytic + numeric), 1e-12)
    return max(abs(a - b) for a, b in zip(analytic, numeric)) / scale


def _random_gm(rng):
    nc = int(rng.choice([1, 2, 4]))
    p = rng.dirichlet(np.ones(nc))
    mu = rng.normal(size=nc) + 1j * rng.normal(size=nc)
    return p, mu, np.exp(rng.normal(size=nc))


def check_soft_threshold_derivs(probes=500, seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(probes):
        lam, s2 = rng.uniform(0.1, 2), rng.uniform(0.1, 2)
        r = (lam * np.sqrt(s2) + rng.uniform(0.05, 3)) * np.exp(1j * rng.uniform(-np.pi, np.pi))
        d = soft_threshold_derivs(r, lam, s2)
        fd = _fd_wirtinger(lambda z: complex(soft_threshold(z, lam, s2)), r)
        worst = max(worst, _pair_err((complex(d.d_r), complex(d.d_rconj)), fd))
    return CheckResult("soft-threshold derivatives vs finite differences", worst, 1e-5)


def check_gm_derivs(probes=500, seed=1):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(probes):
        p, mu, var = _random_gm(rng)
        s2 = float(np.exp(rng.normal()))
        r = complex(*rng.normal(size=2) * 2)
        d = gm_posterior_mean_derivs(r, p, mu, var, s2)
        fd = _fd_wirtinger(lambda z: complex(gm_posterior_mean(z, p, mu, var, s2)), r)
        worst = max(worst, _pair_err((complex(d.d_r), complex(d.d_rconj)), fd))
    return CheckResult("mixture shrinkage derivatives vs finite differences", worst, 1e-5)


def check_gm_quadrature(cases=1000, seed=2):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        nc = int(rng.choice([1, 2, 4]))
        theta = GmParams(rng.normal(size=nc), rng.normal(size=nc) + 1j * rng.normal(size=nc),
                         rng.normal(size=nc))
        r = complex(*rng.normal(size=2) * 2)
        s2 = float(np.exp(rng.normal()))
        exact = complex(gm_shrinkage(r, theta, s2))
        ref = gm_posterior_oracle(r, theta, s2)
        worst = max(worst, abs(exact - ref) / max(abs(exact), abs(ref), 1e-12))
    return CheckResult("mixture shrinkage vs quadrature", worst, 1e-6)


def check_wiener(samples=10_000, seed=3):
    rng = np.random.default_rng(seed)
    r = 5 * (rng.normal(size=samples) + 1j * rng.normal(size=samples))
    var = np.exp(rng.normal(size=samples))
    s2 = np.exp(rng.normal(size=samples))
    out = gm_posterior_mean(r, np.ones((samples, 1)), np.zeros((samples, 1)), var[:, None], s2)
    worst = float(np.max(np.abs(out - var / (s2 + var) * r)))
    return CheckResult("single zero-mean component equals Wiener scaling", worst, 1e-12)


def _gradient_problem(kind, n_layers, seed):
    rng = np.random.default_rng(seed)
    sys = gen_sensing(16, 8, rng)
    src = lambda count, r: sample_sv_channels(ArrayGeometry.ula(16), 2, count, r)[1]
    batch = build_dataset(src, sys, SnrPolicy.range(0, 10), 8, rng)
    layers = []
    for _ in range(n_layers):
        b = sys.a.T + 0.1 * (rng.normal(size=(16, 8)) + 1j * rng.normal(size=(16, 8)))
        if kind == "LAMP":
            shrink = SoftThresholdParams(rng.uniform(0.3, 1.5))
        else:
            shrink = GmParams(rng.normal(size=4), 0.3 * (rng.normal(size=4) + 1j * rng.normal(size=4)),
                              rng.normal(size=4))
        layers.append(LayerParams(b, shrink))
    return sys, batch, UnfoldedNetwork(kind, layers)


def gradient_errors(kind, n_layers, probes_per_class=50, seed=4, h=1e-5):
    """Worst relative gradient error per variable class, sampled over all layers.

    Probes whose +-h step moves a soft-threshold input across ``|r| = tau``
    are skipped: the loss has a kink there and differences are meaningless.
    """
    sys, batch, net = _gradient_problem(kind, n_layers, seed)
    params = network_to_params(net)
    names = [name for t in range(n_layers) for name in layer_names(kind, t)]
    grads = backprop(net, sys, batch, "nonlinear", names)

    def loss(p):
        return loss_nonlinear(sys, params_to_network(p, kind, n_layers), batch)

    def active_set(p):
        _, trace = network_forward(sys, batch.y, params_to_network(p, kind, n_layers))
        return [est != 0 for est in trace.estimates]

    base_active = active_set(params) if kind == "LAMP" else None
    classes = {}
    for name in names:
        classes.setdefault(variable_class(name), []).append(name)
    rng = np.random.default_rng(seed + 1)
    worst = {}
    for cls, members in classes.items():
        errs = []
        attempts = 0
        while len(errs) < probes_per_class and attempts < 20 * probes_per_class:
            attempts += 1
            name = members[int(rng.integers(len(members)))]
            index = tuple(int(rng.integers(s)) for s in params[name].shape)
            plus = {k: np.array(v, dtype=float, copy=True) for k, v in params.items()}
            minus = {k: np.array(v, dtype=float, copy=True) for k, v in params.items()}
            plus[name][index] += h
            minus[name][index] -= h
            if base_active is not None:
                same = all(np.array_equal(a, b) and np.array_equal(a, c) for a, b, c in
                           zip(base_active, active_set(plus), active_set(minus)))
                if not same:
                    continue
            fd = (loss(plus) - loss(minus)) / (2 * h)
            g = float(grads[name][index])
            scale = max(abs(g), abs(fd), 1e-6 * float(np.max(np.abs(grads[name]))), 1e-12)
            errs.append(abs(g - fd) / scale)
        worst[cls] = (max(errs) if errs else np.inf, len(errs))
    return worst


def check_gradients(kind, n_layers, probes_per_class=50, seed=4):
    per_class = gradient_errors(kind, n_layers, probes_per_class, seed)
    worst = max(err for err, _ in per_class.values())
    if any(count < probes_per_class for _, count in per_class.values()):
        worst = np.inf
    return CheckResult(f"{kind} T={n_layers} backprop vs finite differences", worst, 1e-4)


def run_all(quick=False):
    """Run every check; ``quick`` shrinks probe counts for a fast smoke run."""
    scale = 10 if quick else 1
    results = [
        check_soft_threshold_derivs(500 // scale),
        check_gm_derivs(500 // scale),
        check_gm_quadrature(1000 // scale),
        check_wiener(10_000 // scale),
    ]
    layer_counts = (1, 2) if quick else (1, 2, 3)
    for kind in ("LAMP", "GMLAMP"):
        for t in layer_counts:
            results.append(check_gradients(kind, t, 50 // scale))
    return results
