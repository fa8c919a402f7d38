"""scikit-learn style wrappers: ``fit(X, Y)`` on instances and optimal
solutions, ``predict(X)`` returns feasible solutions, ``score`` is the mean
Exceed_ratio against reference solutions.
"""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from ._validation import InputError
from .baselines import GdConfig, MtfnnConfig, gd_solve, mtfnn_predict, mtfnn_train
from .diffusion import SampleConfig, TrainConfig, sample_batch, train
from .evaluation import exceed_ratio
from .oracle import dataset_from_arrays
from .problems import get_problem


class _ProblemEstimator(BaseEstimator):

    def _spec(self):
        return get_problem(self.problem)

    def _check_X(self, X):
        spec = self._spec()
        X = check_array(X, dtype=np.float64, ensure_2d=False)
        single = X.ndim == 1
        X = np.atleast_2d(X)
        if X.shape[1] != spec.x_dim:
            raise InputError(f"X must have {spec.x_dim} columns, got {X.shape[1]}")
        return X, single

    def _check_XY(self, X, Y):
        spec = self._spec()
        X = check_array(X, dtype=np.float64)
        Y = check_array(Y, dtype=np.float64)
        if X.shape[1] != spec.x_dim or Y.shape[1] != spec.y_dim:
            raise InputError(f"expected X with {spec.x_dim} and Y with {spec.y_dim} columns")
        if len(X) != len(Y):
            raise InputError("X and Y differ in length")
        return dataset_from_arrays(spec, X, Y, seed=self.random_state)

    def score(self, X, Y):
        """Mean Exceed_ratio of ``predict(X)`` against reference solutions ``Y``."""
        X, _ = self._check_X(X)
        return float(np.mean(exceed_ratio(self._spec(), X, self.predict(X), Y)))


class DiffusionOptimizer(_ProblemEstimator):
    """Conditional denoising diffusion optimizer with classifier-free guidance."""

    def __init__(self, problem="MSR3", T=20, p_uncond=0.1, epochs=200, lr=0.005,
                 milestones=(100, 150), gamma=0.1, batch_size=128, ema_decay=0.999,
                 augment=False, omega=500.0, num_samples=1, normalize_first_k=5,
                 variance_mode="paper_eq13", random_state=0):
        self.problem = problem
        self.T = T
        self.p_uncond = p_uncond
        self.epochs = epochs
        self.lr = lr
        self.milestones = milestones
        self.gamma = gamma
        self.batch_size = batch_size
        self.ema_decay = ema_decay
        self.augment = augment
        self.omega = omega
        self.num_samples = num_samples
        self.normalize_first_k = normalize_first_k
        self.variance_mode = variance_mode
        self.random_state = random_state

    def _train_config(self):
        return TrainConfig(T=self.T, p_uncond=self.p_uncond, epochs=self.epochs, lr=self.lr,
                           milestones=tuple(self.milestones), gamma=self.gamma,
                           batch_size=self.batch_size, ema_decay=self.ema_decay,
                           augment=self.augment, seed=self.random_state)

    def _sample_config(self):
        return SampleConfig(omega=self.omega, num_samples=self.num_samples,
                            normalize_first_k=self.normalize_first_k,
                            variance_mode=self.variance_mode, seed=self.random_state)

    def fit(self, X, Y):
        data = self._check_XY(X, Y)
        self.model_ = train(data, self._train_config())
        self.loss_history_ = list(self.model_.loss_history)
        self.n_features_in_ = data.X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        X, single = self._check_X(X)
        Y, _ = sample_batch(self.model_, X, self._sample_config())
        return Y[0] if single else Y


class MTFNNRegressor(_ProblemEstimator):
    """Multi-task feedforward network mapping an instance to one solution."""

    def __init__(self, problem="MSR3", epochs=200, lr=0.005, milestones=(100, 150),
                 gamma=0.1, batch_size=128, random_state=0):
        self.problem = problem
        self.epochs = epochs
        self.lr = lr
        self.milestones = milestones
        self.gamma = gamma
        self.batch_size = batch_size
        self.random_state = random_state

    def fit(self, X, Y):
        data = self._check_XY(X, Y)
        cfg = MtfnnConfig(epochs=self.epochs, lr=self.lr, milestones=tuple(self.milestones),
                          gamma=self.gamma, batch_size=self.batch_size, seed=self.random_state)
        self.params_ = mtfnn_train(data, cfg=cfg)
        self.loss_history_ = list(self.params_.loss_history)
        self.n_features_in_ = data.X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "params_")
        X, single = self._check_X(X)
        Y = mtfnn_predict(self.params_, X)
        return Y[0] if single else Y


class GradientDescentOptimizer(_ProblemEstimator):
    """Per-instance projected gradient baseline; ``fit`` only validates."""

    def __init__(self, problem="MSR3", step=1e-2, iterations=500, restarts=None,
                 penalty=10.0, random_state=0):
        self.problem = problem
        self.step = step
        self.iterations = iterations
        self.restarts = restarts
        self.penalty = penalty
        self.random_state = random_state

    def fit(self, X, Y=None):
        X, _ = self._check_X(X)
        self.config_ = GdConfig(self.step, self.iterations, self.restarts, self.penalty,
                                self.random_state)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "config_")
        X, single = self._check_X(X)
        Y = np.array([gd_solve(self._spec(), x, self.config_) for x in X])
        return Y[0] if single else Y
