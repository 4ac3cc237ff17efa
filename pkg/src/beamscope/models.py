"""scikit-learn style wrappers around the channel estimators.

Every estimator maps measurement rows ``Y`` (n_samples x M, complex) to
beamspace channel estimates (n_samples x N).  ``fit(Y, H)`` takes the
noiseless beamspace labels ``H``; the model-based estimators only validate
shapes there, the learned ones train.  ``score`` is the negative NMSE in dB,
so larger is better as scikit-learn expects.
"""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_complex_2d, check_paired, check_positive_int, check_random_state
from .estimators import (
    PAPER_AMP_LAMBDA,
    AmpConfig,
    amp_estimate,
    network_forward,
    omp_estimate,
)
from .evaluation import nmse_db
from .measurement import MeasurementBatch, SensingSystem
from .training import TrainConfig, train_layer_by_layer


def _sensing(sensing):
    if isinstance(sensing, SensingSystem):
        return sensing
    if sensing is None:
        raise ValueError("a sensing matrix is required")
    return SensingSystem(np.asarray(sensing, dtype=float))


class _ChannelEstimator(BaseEstimator):
    def _validate_fit(self, Y, H):
        self.sensing_ = _sensing(self.sensing)
        Y = check_complex_2d(Y, self.sensing_.m, "Y")
        if H is not None:
            H = check_complex_2d(H, self.sensing_.n, "H")
            check_paired(Y, H, "Y", "H")
        self.n_features_in_ = self.sensing_.m
        return Y, H

    def _validate_predict(self, Y):
        check_is_fitted(self, "sensing_")
        return check_complex_2d(Y, self.sensing_.m, "Y")

    def score(self, Y, H):
        """Negative NMSE in dB of the estimates of ``H`` from ``Y``."""
        H = check_complex_2d(H, name="H")
        return -nmse_db(self.predict(Y), H)


class AMPEstimator(_ChannelEstimator):
    """Complex AMP with a fixed soft-threshold level ``lam``."""

    def __init__(self, sensing=None, iterations=10, lam=PAPER_AMP_LAMBDA):
        self.sensing = sensing
        self.iterations = iterations
        self.lam = lam

    def fit(self, Y, H=None):
        self._validate_fit(Y, H)
        self.config_ = AmpConfig(check_positive_int(self.iterations, "iterations"), self.lam)
        return self

    def predict(self, Y):
        Y = self._validate_predict(Y)
        return amp_estimate(self.sensing_, Y, self.config_)[0]


class OMPEstimator(_ChannelEstimator):
    """Orthogonal matching pursuit; ``sparsity=None`` picks ``round(24 N / 256)``."""

    def __init__(self, sensing=None, sparsity=None):
        self.sensing = sensing
        self.sparsity = sparsity

    def fit(self, Y, H=None):
        self._validate_fit(Y, H)
        n = self.sensing_.n
        self.sparsity_ = (max(1, round(24 * n / 256)) if self.sparsity is None
                          else check_positive_int(self.sparsity, "sparsity"))
        return self

    def predict(self, Y):
        Y = self._validate_predict(Y)
        return omp_estimate(self.sensing_, Y, self.sparsity_)


class _UnfoldedEstimator(_ChannelEstimator):
    _kind = None

    def _train_config(self):
        return TrainConfig(
            batch_size=self.batch_size,
            max_steps=self.max_steps,
            patience=self.patience,
            seed=self.random_state if self.random_state is not None else 0,
            **self._extra_config(),
        )

    def _extra_config(self):
        return {}

    def fit(self, Y, H, snr_db=None):
        """Layer-by-layer training; ``validation_fraction`` of the rows is held out."""
        Y, H = self._validate_fit(Y, H)
        if H is None:
            raise ValueError("learned estimators need labels H")
        n_layers = check_positive_int(self.n_layers, "n_layers")
        if not 0 < self.validation_fraction < 1:
            raise ValueError("validation_fraction must lie in (0, 1)")
        snr = np.full(len(Y), np.nan) if snr_db is None else np.broadcast_to(snr_db, (len(Y),))
        batch = MeasurementBatch(Y, H, np.asarray(snr, dtype=float))
        order = check_random_state(self.random_state).permutation(len(Y))
        n_val = max(1, int(round(self.validation_fraction * len(Y))))
        if n_val >= len(Y):
            raise ValueError("need more samples than the validation split")
        val, train = batch.subset(order[:n_val]), batch.subset(order[n_val:])
        self.network_, self.report_ = train_layer_by_layer(
            self.sensing_, train, val, self._kind, n_layers, self._train_config())
        return self

    def predict(self, Y):
        Y = self._validate_predict(Y)
        check_is_fitted(self, "network_")
        return network_forward(self.sensing_, Y, self.network_)[0]


class LAMPEstimator(_UnfoldedEstimator):
    """Unfolded AMP with a trained linear map and soft-threshold level per layer."""

    _kind = "LAMP"

    def __init__(self, sensing=None, n_layers=8, batch_size=128, max_steps=2000, patience=3,
                 validation_fraction=0.1, random_state=None):
        self.sensing = sensing
        self.n_layers = n_layers
        self.batch_size = batch_size
        self.max_steps = max_steps
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.random_state = random_state


class GMLAMPEstimator(_UnfoldedEstimator):
    """Unfolded AMP whose shrinkage is the posterior mean under a trained Gaussian mixture."""

    _kind = "GMLAMP"

    def __init__(self, sensing=None, n_layers=8, n_components=4, batch_size=128, max_steps=2000,
                 patience=3, validation_fraction=0.1, random_state=None):
        self.sensing = sensing
        self.n_layers = n_layers
        self.n_components = n_components
        self.batch_size = batch_size
        self.max_steps = max_steps
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _extra_config(self):
        return {"nc": check_positive_int(self.n_components, "n_components")}
