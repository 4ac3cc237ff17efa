import logging

import numpy as np
import pytest

from beamscope.channel import ArrayGeometry, sample_sv_channels
from beamscope.estimators import LayerParams, UnfoldedNetwork, network_forward
from beamscope.measurement import MeasurementBatch, SnrPolicy, build_dataset, gen_sensing
from beamscope.shrinkage import GmParams, SoftThresholdParams
from beamscope import training
from beamscope.training import (
    AdamState,
    SnrDispatcher,
    TrainConfig,
    adam_step,
    backprop,
    layer_names,
    loss_linear,
    loss_nonlinear,
    network_to_params,
    params_to_network,
    train_layer_by_layer,
    variable_class,
)

from .oracles import fd_param_grad


@pytest.fixture(scope="module")
def tiny():
    rng = np.random.default_rng(21)
    sys = gen_sensing(16, 8, rng)
    src = lambda count, r: sample_sv_channels(ArrayGeometry.ula(16), 2, count, r)[1]
    batch = build_dataset(src, sys, SnrPolicy.range(0, 10), 6, rng)
    return sys, batch, src


def random_net(sys, kind, n_layers, seed):
    rng = np.random.default_rng(seed)
    layers = []
    for _ in range(n_layers):
        b = sys.a.T + 0.1 * (rng.normal(size=(sys.n, sys.m)) + 1j * rng.normal(size=(sys.n, sys.m)))
        if kind == "LAMP":
            shrink = SoftThresholdParams(rng.uniform(0.3, 1.5))
        else:
            shrink = GmParams(rng.normal(size=4), 0.3 * (rng.normal(size=4) + 1j * rng.normal(size=4)),
                              rng.normal(size=4))
        layers.append(LayerParams(b, shrink))
    return UnfoldedNetwork(kind, layers)


# -- losses -----------------------------------------------------------------------


def test_losses_vanish_on_perfect_labels(tiny):
    sys, batch, _ = tiny
    net = random_net(sys, "LAMP", 2, 0)
    _, trace = network_forward(sys, batch.y, net)
    assert loss_linear(sys, net, MeasurementBatch(batch.y, trace.r[1], batch.snr_db)) == 0
    assert loss_nonlinear(sys, net, MeasurementBatch(batch.y, trace.estimates[1], batch.snr_db)) == 0


def test_loss_single_unit_error(tiny):
    sys, batch, _ = tiny
    net = random_net(sys, "LAMP", 1, 1)
    _, trace = network_forward(sys, batch.y[:1], net)
    truth = trace.r[0].copy()
    truth[0, 0] -= 1 + 1j
    assert loss_linear(sys, net, MeasurementBatch(batch.y[:1], truth, batch.snr_db[:1])) == pytest.approx(2.0)


def test_loss_identity_shrinkage(tiny):
    sys, batch, _ = tiny
    net = UnfoldedNetwork.from_sensing(sys, "LAMP", 3, SoftThresholdParams(0.0))
    for t in range(3):
        assert loss_nonlinear(sys, net, batch, t) == loss_linear(sys, net, batch, t)


@pytest.mark.parametrize("kind", ["LAMP", "GMLAMP"])
def test_losses_match_naive_loops(tiny, kind):
    sys, batch, _ = tiny
    net = random_net(sys, kind, 3, 2)
    for t in range(3):
        sub = net.prefix(t + 1)
        lin = nonlin = 0.0
        for d in range(len(batch)):
            _, trace = network_forward(sys, batch.y[d], sub)
            for i in range(sys.n):
                lin += abs(trace.r[t][0, i] - batch.truth[d, i]) ** 2
                nonlin += abs(trace.estimates[t][0, i] - batch.truth[d, i]) ** 2
        assert loss_linear(sys, net, batch, t) == pytest.approx(lin / len(batch), rel=1e-12)
        assert loss_nonlinear(sys, net, batch, t) == pytest.approx(nonlin / len(batch), rel=1e-12)


def test_losses_reject_empty_batch(tiny):
    sys, batch, _ = tiny
    net = random_net(sys, "LAMP", 1, 3)
    empty = batch.subset(np.array([], dtype=int))
    with pytest.raises(ValueError):
        loss_linear(sys, net, empty)
    with pytest.raises(ValueError):
        backprop(net, sys, empty, trainable=["lam0"])


# -- gradients ------------------------------------------------------------------------


def test_empty_mask_gives_empty_gradients(tiny):
    sys, batch, _ = tiny
    assert backprop(random_net(sys, "LAMP", 2, 4), sys, batch, trainable=()) == {}


def test_unknown_variable_rejected(tiny):
    sys, batch, _ = tiny
    with pytest.raises(KeyError):
        backprop(random_net(sys, "LAMP", 1, 4), sys, batch, trainable=["B7.re"])


def test_wiener_layer_gradient_closed_form(tiny):
    sys, batch, _ = tiny
    rng = np.random.default_rng(5)
    b = rng.normal(size=(16, 8)) + 1j * rng.normal(size=(16, 8))
    var = 0.8
    net = UnfoldedNetwork("GMLAMP", [LayerParams(b, GmParams.from_moments([1.0], [0.0], [var]))])
    grads = backprop(net, sys, batch, "nonlinear", ["B0.re", "B0.im"])
    # first-layer noise level depends only on y, so the layer is g * B y
    y, h = batch.y, batch.truth
    g = var / (var + np.mean(np.abs(y) ** 2, axis=1))
    e = g[:, None] * (y @ b.T) - h
    outer = np.einsum("d,di,dj->ij", g, np.conj(e), y)
    np.testing.assert_allclose(grads["B0.re"], 2 * outer.real / len(batch), rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(grads["B0.im"], -2 * outer.imag / len(batch), rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("kind", ["LAMP", "GMLAMP"])
def test_gradients_match_finite_differences(tiny, kind):
    sys, batch, _ = tiny
    net = random_net(sys, kind, 2, 6)
    params = network_to_params(net)
    names = [n for t in range(2) for n in layer_names(kind, t)]
    grads = backprop(net, sys, batch, "nonlinear", names)

    def loss_fn(p):
        return loss_nonlinear(sys, params_to_network(p, kind, 2), batch)

    rng = np.random.default_rng(7)
    for name in names:
        shape = params[name].shape
        for _ in range(4):
            index = tuple(int(rng.integers(s)) for s in shape)
            fd = fd_param_grad(loss_fn, params, name, index)
            g = grads[name][index]
            scale = max(abs(g), abs(fd), 1e-6 * np.max(np.abs(grads[name])), 1e-10)
            assert abs(g - fd) / scale <= 1e-4, (name, index, g, fd)


def test_non_finite_forward_is_reported(tiny):
    sys, batch, _ = tiny
    net = random_net(sys, "LAMP", 2, 8)
    net.layers[1].b[:] = 1e308
    with pytest.raises(FloatingPointError, match="layer 1"):
        backprop(net, sys, batch, "nonlinear", ["lam1"])


def test_variable_classes():
    assert variable_class("B12.re") == "B.re"
    assert variable_class("logvar3") == "logvar"
    assert variable_class("mu0.im") == "mu.im"


def test_params_round_trip(tiny):
    sys, _, _ = tiny
    net = random_net(sys, "GMLAMP", 2, 9)
    back = params_to_network(network_to_params(net), "GMLAMP", 2)
    for x, z in zip(net.layers, back.layers):
        np.testing.assert_array_equal(x.b, z.b)
        np.testing.assert_array_equal(x.shrink.log_vars, z.shrink.log_vars)


def test_negative_lambda_acts_as_zero(tiny):
    sys, _, _ = tiny
    params = network_to_params(random_net(sys, "LAMP", 1, 10))
    params["lam0"] = np.array(-0.3)
    assert params_to_network(params, "LAMP", 1).layers[0].shrink.lam == 0


# -- Adam ---------------------------------------------------------------------------------


def test_adam_first_step_is_signed_lr():
    g = np.array([3.0, -0.01, 2e-3])
    params, state = adam_step({"x": np.zeros(3)}, {"x": g}, AdamState(), 1e-3)
    np.testing.assert_allclose(params["x"], -1e-3 * np.sign(g), rtol=1e-4)
    assert state.step == 1


def test_adam_zero_gradient():
    start = {"x": np.array([1.0, -2.0])}
    params, state = adam_step(start, {"x": np.array([0.5, 0.5])}, AdamState(), 0.1)
    before_m = state.m["x"].copy()
    after, state2 = adam_step(params, {"x": np.zeros(2)}, state, 0.1)
    # first moment decays; the step is non-zero because the moments still carry history
    np.testing.assert_allclose(state2.m["x"], 0.9 * before_m)
    np.testing.assert_allclose(state2.v["x"], 0.999 * state.v["x"])
    untouched, _ = adam_step(start, {"x": np.zeros(2)}, AdamState(), 0.1)
    np.testing.assert_array_equal(untouched["x"], start["x"])


def test_adam_two_steps_by_hand():
    g, lr, eps = 0.4, 0.01, 1e-8
    params, state = adam_step({"x": np.array(1.0)}, {"x": np.array(g)}, AdamState(), lr)
    params, state = adam_step(params, {"x": np.array(g)}, state, lr)
    m1, v1 = 0.1 * g, 0.001 * g * g
    x1 = 1.0 - lr * (m1 / 0.1) / (np.sqrt(v1 / 0.001) + eps)
    m2, v2 = 0.9 * m1 + 0.1 * g, 0.999 * v1 + 0.001 * g * g
    x2 = x1 - lr * (m2 / (1 - 0.81)) / (np.sqrt(v2 / (1 - 0.999**2)) + eps)
    assert float(params["x"]) == pytest.approx(x2, abs=1e-15)


def test_adam_is_pure():
    params = {"x": np.ones(2)}
    state = AdamState()
    adam_step(params, {"x": np.ones(2)}, state, 0.1)
    np.testing.assert_array_equal(params["x"], 1.0)
    assert state.step == 0 and state.m == {}


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step({"x": np.ones(2)}, {"x": np.ones(3)}, AdamState(), 0.1)


# -- schedule ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def small_sets(tiny):
    sys, _, src = tiny
    rng = np.random.default_rng(22)
    train = build_dataset(src, sys, SnrPolicy.range(0, 10), 256, rng)
    val = build_dataset(src, sys, SnrPolicy.range(0, 10), 64, rng)
    return sys, train, val


FAST = TrainConfig(batch_size=64, max_steps=30, patience=2)


def test_single_layer_report(small_sets):
    sys, train, val = small_sets
    net, report = train_layer_by_layer(sys, train, val, "LAMP", 1, FAST)
    assert net.n_layers == 1
    assert list(report.phase_steps) == ["t0.s1", "t0.s2", "t0.s3"]
    assert len(report.subprocedure_val_loss) == 1
    assert all(row[2] >= 0 and row[3] >= 0 for row in report.rows)
    assert report.wall_seconds > 0


def test_training_improves_on_initial_network(small_sets):
    sys, train, val = small_sets
    start = UnfoldedNetwork.from_sensing(sys, "LAMP", 1, SoftThresholdParams(1.0))
    net, report = train_layer_by_layer(sys, train, val, "LAMP", 1, FAST)
    assert report.subprocedure_val_loss[0] <= loss_nonlinear(sys, start, val)
    assert loss_nonlinear(sys, net, val) == pytest.approx(report.subprocedure_val_loss[0], rel=1e-10)


def test_new_layer_starts_from_previous(small_sets, monkeypatch):
    sys, train, val = small_sets
    seen = {}
    original = training._Trainer.run_phase

    def spy(self, params, names, t, loss, rates, label):
        if label == "t1.s5":
            seen.update({k: np.array(v, copy=True) for k, v in params.items()})
        out = original(self, params, names, t, loss, rates, label)
        if label == "t0.s3":
            seen["after0"] = {k: np.array(v, copy=True) for k, v in out[0].items()}
        return out

    monkeypatch.setattr(training._Trainer, "run_phase", spy)
    train_layer_by_layer(sys, train, val, "GMLAMP", 2, FAST)
    after0 = seen["after0"]
    for src, dst in zip(layer_names("GMLAMP", 0), layer_names("GMLAMP", 1)):
        assert seen[dst].tobytes() == after0[src].tobytes()


def test_training_is_deterministic(small_sets):
    sys, train, val = small_sets
    a, ra = train_layer_by_layer(sys, train, val, "GMLAMP", 2, FAST)
    b, rb = train_layer_by_layer(sys, train, val, "GMLAMP", 2, FAST)
    for x, z in zip(a.layers, b.layers):
        assert x.b.tobytes() == z.b.tobytes()
        assert x.shrink.log_vars.tobytes() == z.shrink.log_vars.tobytes()
    assert [r[2:] for r in ra.rows] == [r[2:] for r in rb.rows]


def test_trained_gm_parameters_stay_valid(small_sets):
    sys, train, val = small_sets
    net, _ = train_layer_by_layer(sys, train, val, "GMLAMP", 2, FAST)
    for layer in net.layers:
        assert layer.shrink.weights.sum() == pytest.approx(1.0, abs=1e-12)
        assert np.all(layer.shrink.variances > 0)


def test_report_csv(tmp_path, small_sets):
    sys, train, val = small_sets
    _, report = train_layer_by_layer(sys, train, val, "LAMP", 1, FAST)
    path = tmp_path / "report.csv"
    report.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "step,phase,train_loss,val_loss"
    assert len(lines) == len(report.rows) + 1


def test_training_rejects_bad_input(small_sets):
    sys, train, val = small_sets
    with pytest.raises(ValueError):
        train_layer_by_layer(sys, train.subset(np.array([], dtype=int)), val, "LAMP", 1, FAST)
    with pytest.raises(ValueError):
        train_layer_by_layer(sys, train, val, "LAMP", 0, FAST)
    with pytest.raises(ValueError):
        TrainConfig(lr_individual=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises_with_report(small_sets):
    sys, train, val = small_sets
    bad = TrainConfig(batch_size=64, max_steps=5, lr_individual=1e300, lr_joint_schedule=(1e300,))
    with pytest.raises(training.TrainingDiverged) as info:
        train_layer_by_layer(sys, train, val, "LAMP", 2, bad)
    assert info.value.report.aborted


# -- SNR dispatch ---------------------------------------------------------------------


def test_dispatcher_routes_by_snr(caplog):
    d = SnrDispatcher("low", "high")
    assert d.select(3.0) == "low"
    assert d.select(9.99) == "low"
    assert d.select(10.0) == "high"
    assert d.select(20.0) == "high"
    with caplog.at_level(logging.WARNING):
        assert d.select(25.0) == "high"
        assert d.select(-5.0) == "low"
    assert sum("outside" in r.message for r in caplog.records) == 2
