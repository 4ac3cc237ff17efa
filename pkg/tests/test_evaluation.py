import numpy as np
import pytest

from beamscope.channel import ArrayGeometry
from beamscope.estimators import UnfoldedNetwork, save_network
from beamscope.evaluation import (
    CSV_COLUMNS,
    EstimatorSpec,
    ExperimentConfig,
    ExperimentResult,
    MissingCheckpointError,
    ResultRow,
    evaluation_set,
    export_csv,
    nmse,
    nmse_db,
    read_csv,
    run_sweep,
    sensing_for,
)
from beamscope.shrinkage import SoftThresholdParams


# -- NMSE ---------------------------------------------------------------------------


def test_nmse_examples():
    h = np.array([[1 + 1j, 0], [0, 2]])
    assert nmse(h, h) == 0
    assert nmse_db(h, h) == -150.0
    assert nmse(np.zeros_like(h), h) == 1.0
    assert nmse_db(np.zeros_like(h), h) == 0.0


def test_nmse_hand_computed():
    truth = np.array([[1.0, 0.0], [0.0, 2.0]])
    est = np.array([[1.0, 1.0], [0.0, 1.0]])
    # errors 1 and 1 over energies 1 and 4
    assert nmse(est, truth) == pytest.approx(2 / 5)


def test_nmse_is_energy_weighted_mean():
    rng = np.random.default_rng(0)
    truth = rng.normal(size=(7, 5)) + 1j * rng.normal(size=(7, 5))
    truth *= rng.uniform(0.1, 3, size=(7, 1))
    est = truth + 0.3 * (rng.normal(size=(7, 5)) + 1j * rng.normal(size=(7, 5)))
    energy = np.sum(np.abs(truth) ** 2, axis=1)
    per_sample = np.sum(np.abs(est - truth) ** 2, axis=1) / energy
    assert nmse(est, truth) == pytest.approx(np.sum(per_sample * energy) / energy.sum(), rel=1e-12)


def test_nmse_unitary_invariance():
    rng = np.random.default_rng(1)
    truth = rng.normal(size=(4, 6)) + 1j * rng.normal(size=(4, 6))
    est = rng.normal(size=(4, 6)) + 1j * rng.normal(size=(4, 6))
    q, _ = np.linalg.qr(rng.normal(size=(6, 6)) + 1j * rng.normal(size=(6, 6)))
    assert nmse(est @ q.T, truth @ q.T) == pytest.approx(nmse(est, truth), rel=1e-12)


def test_nmse_errors():
    with pytest.raises(ValueError):
        nmse(np.ones((2, 2)), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        nmse(np.ones((2, 3)), np.ones((2, 2)))
    with pytest.raises(ValueError):
        nmse(np.ones((0, 2)), np.ones((0, 2)))


# -- configuration ------------------------------------------------------------------


CONFIG = """
schema_version = 1
seed = 5

[system]
geometry = "ULA"
n = 32
m = 16
num_paths = 2

[data]
snr_grid_db = [0, 10]
train_size = 64
val_size = 16
test_size = 20

[train]
batch_size = 32
max_steps = 10

[[estimators]]
name = "AMP"
kind = "amp"

[[estimators]]
name = "OMP"
kind = "omp"
sparsity = 3

[output]
dir = "out"
results = "res.csv"
"""


def test_config_from_toml(tmp_path):
    path = tmp_path / "exp.toml"
    path.write_text(CONFIG)
    cfg = ExperimentConfig.from_toml(path)
    assert cfg.n == 32 and cfg.m == 16
    assert cfg.snr_grid_db == (0.0, 10.0)
    assert [e.name for e in cfg.estimators] == ["AMP", "OMP"]
    assert cfg.output_dir == tmp_path / "out"
    assert cfg.train.max_steps == 10 and cfg.train.seed == 5
    assert cfg.with_seed(9).train.seed == 9


def test_config_upa(tmp_path):
    path = tmp_path / "exp.toml"
    path.write_text(CONFIG.replace('geometry = "ULA"\nn = 32', 'geometry = "UPA"\nn = [4, 8]'))
    assert ExperimentConfig.from_toml(path).geometry == ArrayGeometry.upa(4, 8)


@pytest.mark.parametrize("bad", [
    ("schema_version = 1", "schema_version = 2"),
    ("snr_grid_db = [0, 10]", "snr_grid_db = [10, 0]"),
    ("snr_grid_db = [0, 10]", "snr_grid_db = []"),
    ("test_size = 20", "test_size = 0"),
    ('kind = "omp"', 'kind = "cosamp"'),
])
def test_config_rejects_invalid(tmp_path, bad):
    path = tmp_path / "exp.toml"
    path.write_text(CONFIG.replace(*bad))
    with pytest.raises(ValueError):
        ExperimentConfig.from_toml(path)


def test_config_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError, match="missing.toml"):
        ExperimentConfig.from_toml(tmp_path / "missing.toml")


def test_omp_default_sparsity_ratio():
    assert EstimatorSpec("x", "omp").omp_sparsity(256) == 24
    assert EstimatorSpec("x", "omp").omp_sparsity(64) == 6


# -- sweep ------------------------------------------------------------------------


def small_config(tmp_path, estimators, grid=(0.0, 10.0), test_size=20):
    return ExperimentConfig(ArrayGeometry.ula(32), 16, num_paths=2, estimators=tuple(estimators),
                            snr_grid_db=grid, test_size=test_size, output_dir=tmp_path, seed=3)


def test_sweep_rows_sorted_and_counted(tmp_path):
    cfg = small_config(tmp_path, [EstimatorSpec("OMP", "omp", sparsity=3), EstimatorSpec("AMP", "amp")],
                       grid=(0.0, 5.0, 10.0))
    result = run_sweep(cfg)
    assert len(result) == 6
    assert [(r.estimator, r.snr_db) for r in result.rows] == [
        ("AMP", 0.0), ("AMP", 5.0), ("AMP", 10.0), ("OMP", 0.0), ("OMP", 5.0), ("OMP", 10.0)]
    assert all(np.isfinite(r.nmse_db) and r.n_test == 20 and r.wall_ms == 0 for r in result.rows)
    assert result.lookup("AMP", 10.0).multiplies == 10 * (2 * 16 * 32 + 2 * 16 + 3 * 32)


def test_sweep_single_point(tmp_path):
    cfg = small_config(tmp_path, [EstimatorSpec("AMP", "amp")], grid=(10.0,), test_size=1)
    assert len(run_sweep(cfg)) == 1


def test_sweep_is_reproducible(tmp_path):
    cfg = small_config(tmp_path, [EstimatorSpec("AMP", "amp"), EstimatorSpec("OMP", "omp")])
    export_csv(run_sweep(cfg), tmp_path / "a.csv")
    export_csv(run_sweep(cfg), tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_sweep_threads_match_reference(tmp_path):
    cfg = small_config(tmp_path, [EstimatorSpec("AMP", "amp"), EstimatorSpec("OMP", "omp")])
    ref = run_sweep(cfg)
    par = run_sweep(cfg, threads=3)
    assert [(r.estimator, r.snr_db, r.nmse_db) for r in ref.rows] == \
        [(r.estimator, r.snr_db, r.nmse_db) for r in par.rows]
    assert all(r.wall_ms > 0 for r in par.rows)


def test_sweep_missing_checkpoint_names_estimator(tmp_path):
    cfg = small_config(tmp_path, [EstimatorSpec("myLAMP", "lamp", layers=2, checkpoints="nope.bin")])
    with pytest.raises(MissingCheckpointError, match="myLAMP"):
        run_sweep(cfg)


def test_sweep_learned_with_dispatch(tmp_path):
    specs = [EstimatorSpec("L", "lamp", layers=2, checkpoints=("low.bin", "high.bin"))]
    cfg = ExperimentConfig(ArrayGeometry.ula(32), 16, estimators=tuple(specs), snr_grid_db=(5.0, 15.0),
                           train_snr_ranges=((0, 10), (10, 20)), test_size=10, output_dir=tmp_path)
    sys = sensing_for(cfg)
    save_network(tmp_path / "low.bin", UnfoldedNetwork.from_sensing(sys, "LAMP", 2, SoftThresholdParams(0.0)))
    save_network(tmp_path / "high.bin", UnfoldedNetwork.from_sensing(sys, "LAMP", 2, SoftThresholdParams(50.0)))
    result = run_sweep(cfg, sys=sys)
    # the high-SNR network thresholds everything to zero, so its NMSE is exactly 0 dB
    assert result.lookup("L", 15.0).nmse_db == 0.0
    assert result.lookup("L", 5.0).nmse_db != 0.0


def test_evaluation_set_layout(tmp_path):
    cfg = small_config(tmp_path, [], grid=(0.0, 10.0, 20.0), test_size=4)
    test = evaluation_set(cfg, sensing_for(cfg))
    assert len(test) == 12
    np.testing.assert_array_equal(test.snr_db, np.repeat([0.0, 10.0, 20.0], 4))


# -- CSV ------------------------------------------------------------------------------


def test_csv_empty_result(tmp_path):
    path = tmp_path / "r.csv"
    export_csv(ExperimentResult(), path)
    assert path.read_text() == ",".join(CSV_COLUMNS) + "\n"


def test_csv_line_count_and_round_trip(tmp_path):
    rows = [ResultRow(f"E{k % 4}", float(5 * (k // 4)), -3.14159265 * k, 100, 123456 + k, 1.5)
            for k in range(20)]
    path = tmp_path / "r.csv"
    export_csv(ExperimentResult(rows), path)
    assert len(path.read_text().splitlines()) == 21
    back = read_csv(path)
    for a, b in zip(rows, back.rows):
        assert (a.estimator, a.snr_db, a.n_test, a.multiplies) == (b.estimator, b.snr_db, b.n_test, b.multiplies)
        assert b.nmse_db == pytest.approx(a.nmse_db, rel=1e-5)
    export_csv(back, tmp_path / "again.csv")
    assert (tmp_path / "again.csv").read_bytes() == path.read_bytes()


def test_csv_six_significant_digits(tmp_path):
    path = tmp_path / "r.csv"
    export_csv(ExperimentResult([ResultRow("AMP", 10.0, -7.599371139, 2000, 665600, 0.0)]), path)
    assert path.read_text().splitlines()[1] == "AMP,10,-7.59937,2000,665600,0"


def test_csv_unwritable_path(tmp_path):
    with pytest.raises(OSError, match="nodir"):
        export_csv(ExperimentResult(), tmp_path / "nodir" / "r.csv")
