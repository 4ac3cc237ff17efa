"""NMSE sweeps over SNR for every configured estimator, driven by a TOML config."""

import csv
import dataclasses
import sys as _sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .channel import ArrayGeometry, sample_sv_channels
from .estimators import (
    PAPER_AMP_LAMBDA,
    AmpConfig,
    NetworkKind,
    amp_estimate,
    count_multiplies,
    load_network,
    network_forward,
    omp_estimate,
)
from .measurement import (
    MeasurementBatch,
    SnrPolicy,
    build_dataset,
    gen_sensing,
    load_dataset,
    load_sensing,
)
from .training import SnrDispatcher, TrainConfig

if _sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SCHEMA_VERSION = 1
NMSE_FLOOR_DB = -150.0
CSV_COLUMNS = ("estimator", "snr_db", "nmse_db", "n_test", "multiplies", "wall_ms")
ESTIMATOR_KINDS = ("amp", "omp", "lamp", "gmlamp")


def nmse(estimates, truths):
    """Total squared error over total channel energy, pooled over the whole batch."""
    est = np.asarray(estimates, dtype=np.complex128)
    ref = np.asarray(truths, dtype=np.complex128)
    if est.shape != ref.shape:
        raise ValueError(f"estimates {est.shape} and truths {ref.shape} differ in shape")
    if ref.size == 0:
        raise ValueError("empty batch")
    energy = np.sum(ref.real**2 + ref.imag**2)
    if energy == 0:
        raise ValueError("truths have zero total energy")
    err = est - ref
    return float(np.sum(err.real**2 + err.imag**2) / energy)


def nmse_db(estimates, truths):
    value = nmse(estimates, truths)
    if value <= 0:
        return NMSE_FLOOR_DB
    return max(10.0 * np.log10(value), NMSE_FLOOR_DB)


# -- configuration --------------------------------------------------------------


@dataclass(frozen=True)
class EstimatorSpec:
    name: str
    kind: str
    iterations: int = 10
    lam: float = PAPER_AMP_LAMBDA
    sparsity: int = None
    layers: int = 8
    nc: int = 4
    checkpoints: tuple = ()

    def __post_init__(self):
        kind = self.kind.lower().replace("-", "").replace("_", "")
        if kind not in ESTIMATOR_KINDS:
            raise ValueError(f"estimator {self.name!r}: unknown kind {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        if isinstance(self.checkpoints, (str, Path)):
            object.__setattr__(self, "checkpoints", (str(self.checkpoints),))
        else:
            object.__setattr__(self, "checkpoints", tuple(str(p) for p in self.checkpoints))

    @property
    def learned(self):
        return self.kind in ("lamp", "gmlamp")

    @property
    def network_kind(self):
        return NetworkKind.LAMP if self.kind == "lamp" else NetworkKind.GMLAMP

    def steps(self, n):
        if self.kind == "amp":
            return self.iterations
        if self.kind == "omp":
            return self.omp_sparsity(n)
        return self.layers

    def omp_sparsity(self, n):
        # default keeps the 24-of-256 sparsity ratio
        return self.sparsity if self.sparsity is not None else max(1, round(24 * n / 256))


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to generate data, train networks and run a sweep.

    See ``README.md`` for the TOML layout.  Relative paths resolve against
    ``output_dir``.
    """

    geometry: ArrayGeometry
    m: int
    num_paths: int = 3
    k_users: int = 1
    estimators: tuple = ()
    snr_grid_db: tuple = (0.0, 5.0, 10.0, 15.0, 20.0)
    train_snr_ranges: tuple = ((0.0, 10.0),)
    train_size: int = 20000
    val_size: int = 2000
    test_size: int = 2000
    seed: int = 0
    output_dir: Path = Path(".")
    results: str = "results.csv"
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        grid = tuple(float(s) for s in self.snr_grid_db)
        if not grid:
            raise ValueError("snr_grid_db must be non-empty")
        if list(grid) != sorted(grid):
            raise ValueError("snr_grid_db must be sorted")
        object.__setattr__(self, "snr_grid_db", grid)
        ranges = tuple((float(lo), float(hi)) for lo, hi in self.train_snr_ranges)
        if len(ranges) not in (1, 2) or any(hi < lo for lo, hi in ranges):
            raise ValueError("train_snr_ranges needs one or two [low, high] pairs")
        object.__setattr__(self, "train_snr_ranges", ranges)
        for name in ("train_size", "val_size", "test_size", "m", "num_paths", "k_users"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.m > self.geometry.num_antennas:
            raise ValueError("m cannot exceed the number of antennas")
        names = [e.name for e in self.estimators]
        if len(set(names)) != len(names):
            raise ValueError("estimator names must be unique")
        object.__setattr__(self, "output_dir", Path(self.output_dir))

    @property
    def n(self):
        return self.geometry.num_antennas

    def path(self, name):
        p = Path(name)
        return p if p.is_absolute() else self.output_dir / p

    @classmethod
    def from_dict(cls, raw, base_dir=Path(".")):
        raw = dict(raw)
        version = raw.pop("schema_version", None)
        if version != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION})")
        system = raw.get("system", {})
        data = raw.get("data", {})
        train = dict(raw.get("train", {}))
        train.setdefault("seed", raw.get("seed", 0))
        output = raw.get("output", {})
        kind = system.get("geometry", "ULA").upper()
        n = system.get("n", 64)
        geometry = ArrayGeometry.ula(n) if kind == "ULA" else ArrayGeometry.upa(*n)
        specs = []
        for entry in raw.get("estimators", []):
            entry = dict(entry)
            if "checkpoint" in entry:
                entry["checkpoints"] = entry.pop("checkpoint")
            specs.append(EstimatorSpec(**entry))
        if "lr_joint_schedule" in train:
            train["lr_joint_schedule"] = tuple(train["lr_joint_schedule"])
        if "gm_log_var_init" in train and not np.isscalar(train["gm_log_var_init"]):
            train["gm_log_var_init"] = tuple(train["gm_log_var_init"])
        out_dir = Path(output.get("dir", "."))
        if not out_dir.is_absolute():
            out_dir = Path(base_dir) / out_dir
        return cls(
            geometry=geometry,
            m=system.get("m", 32),
            num_paths=system.get("num_paths", 3),
            k_users=system.get("k_users", 1),
            estimators=tuple(specs),
            snr_grid_db=tuple(data.get("snr_grid_db", (0, 5, 10, 15, 20))),
            train_snr_ranges=tuple(tuple(r) for r in data.get("train_snr_ranges", [[0, 10]])),
            train_size=data.get("train_size", 20000),
            val_size=data.get("val_size", 2000),
            test_size=data.get("test_size", 2000),
            seed=raw.get("seed", 0),
            output_dir=out_dir,
            results=output.get("results", "results.csv"),
            train=TrainConfig(**train),
        )

    @classmethod
    def from_toml(cls, path):
        path = Path(path)
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except FileNotFoundError:
            raise FileNotFoundError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ValueError(f"{path}: {exc}") from None
        return cls.from_dict(raw, base_dir=path.parent)

    def with_seed(self, seed):
        return dataclasses.replace(self, seed=seed, train=dataclasses.replace(self.train, seed=seed))


# -- data ---------------------------------------------------------------------------


def stream_rngs(seed):
    """Independent generators for the sensing matrix, training, validation and test data."""
    seq = np.random.SeedSequence(seed)
    sensing, train, val, test = seq.spawn(4)
    return {
        "sensing": np.random.default_rng(sensing),
        "train": np.random.default_rng(train),
        "val": np.random.default_rng(val),
        "test": np.random.default_rng(test),
    }


def channel_source(cfg):
    def draw(count, rng):
        return sample_sv_channels(cfg.geometry, cfg.num_paths, count, rng)[1]

    return draw


def sensing_for(cfg):
    path = cfg.path("sensing.npy")
    if path.exists():
        sys = load_sensing(path)
        if (sys.n, sys.m) != (cfg.n, cfg.m):
            raise ValueError(f"{path}: stored sensing matrix is {sys.m}x{sys.n}, "
                             f"config needs {cfg.m}x{cfg.n}")
        return sys
    return gen_sensing(cfg.n, cfg.m, stream_rngs(cfg.seed)["sensing"])


def training_sets(cfg, sys):
    """One (train, val) pair per training SNR range, in range order."""
    rngs = stream_rngs(cfg.seed)
    src = channel_source(cfg)
    out = []
    for lo, hi in cfg.train_snr_ranges:
        policy = SnrPolicy.range(lo, hi)
        out.append((build_dataset(src, sys, policy, cfg.train_size, rngs["train"]),
                    build_dataset(src, sys, policy, cfg.val_size, rngs["val"])))
    return out


def evaluation_set(cfg, sys):
    """``test_size`` samples per SNR grid point, stacked in grid order."""
    path = cfg.path("test.bsds")
    if path.exists():
        return load_dataset(path)
    rng = stream_rngs(cfg.seed)["test"]
    src = channel_source(cfg)
    parts = [build_dataset(src, sys, SnrPolicy.single(snr), cfg.test_size, rng)
             for snr in cfg.snr_grid_db]
    return MeasurementBatch(np.concatenate([p.y for p in parts]),
                            np.concatenate([p.truth for p in parts]),
                            np.concatenate([p.snr_db for p in parts]))


# -- sweep --------------------------------------------------------------------------


@dataclass(frozen=True)
class ResultRow:
    estimator: str
    snr_db: float
    nmse_db: float
    n_test: int
    multiplies: int
    wall_ms: float


@dataclass
class ExperimentResult:
    rows: list = field(default_factory=list)

    def __len__(self):
        return len(self.rows)

    def lookup(self, estimator, snr_db):
        for row in self.rows:
            if row.estimator == estimator and row.snr_db == snr_db:
                return row
        raise KeyError((estimator, snr_db))


class MissingCheckpointError(FileNotFoundError):
    pass


def load_learned(cfg, spec):
    """The network for ``spec``, or an ``SnrDispatcher`` when it has one per SNR range."""
    if not spec.checkpoints:
        raise MissingCheckpointError(
            f"estimator {spec.name!r} has no checkpoint configured; run `beamscope train` first")
    nets = []
    for name in spec.checkpoints:
        path = cfg.path(name)
        if not path.exists():
            raise MissingCheckpointError(
                f"estimator {spec.name!r}: checkpoint {path} not found; run `beamscope train` first")
        net = load_network(path)
        if net.kind is not spec.network_kind:
            raise ValueError(f"estimator {spec.name!r}: {path} holds a {net.kind.value} network")
        nets.append(net)
    if len(nets) == 1:
        return nets[0]
    (lo_low, lo_high), (hi_low, hi_high) = cfg.train_snr_ranges
    return SnrDispatcher(nets[0], nets[1], split_db=hi_low,
                         low_range=(lo_low, lo_high), high_range=(hi_low, hi_high))


def _runner(cfg, spec, sys):
    if spec.kind == "amp":
        amp_cfg = AmpConfig(spec.iterations, spec.lam)
        return lambda y, snr: amp_estimate(sys, y, amp_cfg)[0]
    if spec.kind == "omp":
        sparsity = spec.omp_sparsity(sys.n)
        return lambda y, snr: omp_estimate(sys, y, sparsity)
    model = load_learned(cfg, spec)

    def run(y, snr):
        net = model.select(snr) if isinstance(model, SnrDispatcher) else model
        return network_forward(sys, y, net)[0]

    return run


def run_sweep(cfg, sys=None, test=None, threads=1, timing=None):
    """NMSE of every estimator at every SNR grid point.

    Rows come back sorted by estimator name, then SNR.  ``timing`` defaults
    to on for multi-threaded runs and off for ``threads=1``, so the
    single-threaded output is reproducible byte for byte (``wall_ms = 0``).
    """
    sys = sys if sys is not None else sensing_for(cfg)
    test = test if test is not None else evaluation_set(cfg, sys)
    timing = threads != 1 if timing is None else timing
    runners = {spec.name: _runner(cfg, spec, sys) for spec in cfg.estimators}
    tasks = [(spec, snr) for spec in cfg.estimators for snr in cfg.snr_grid_db]

    def evaluate(task):
        spec, snr = task
        mask = test.snr_db == snr
        if not np.any(mask):
            raise ValueError(f"no test samples at {snr} dB")
        start = time.perf_counter()
        est = runners[spec.name](test.y[mask], snr)
        elapsed = (time.perf_counter() - start) * 1e3 if timing else 0.0
        mult = count_multiplies(spec.kind, sys.n, sys.m, spec.steps(sys.n), spec.nc)
        return ResultRow(spec.name, snr, nmse_db(est, test.truth[mask]), int(mask.sum()),
                         int(mult), elapsed)

    if threads == 1:
        rows = [evaluate(task) for task in tasks]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(evaluate, tasks))
    rows.sort(key=lambda row: (row.estimator, row.snr_db))
    return ExperimentResult(rows)


def _fmt(value):
    return f"{value:.6g}"


def export_csv(result, path):
    path = Path(path)
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_COLUMNS)
            for row in result.rows:
                writer.writerow([row.estimator, _fmt(row.snr_db), _fmt(row.nmse_db), row.n_test,
                                 row.multiplies, _fmt(row.wall_ms)])
    except OSError as exc:
        raise OSError(f"cannot write results to {path}: {exc.strerror or exc}") from exc


def read_csv(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return ExperimentResult([
            ResultRow(r["estimator"], float(r["snr_db"]), float(r["nmse_db"]), int(r["n_test"]),
                      int(r["multiplies"]), float(r["wall_ms"]))
            for r in reader
        ])
