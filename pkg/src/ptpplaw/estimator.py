"""scikit-learn compatible wrapper around the multi-start law fit.

``X`` has four columns in the order ``N, D, r, ptpp``; ``y`` is the loss.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import clip_ratio
from .fitting import FitConfig, FitResult, fit_arrays
from .forms import Features, LawForm

FEATURE_NAMES = ("N", "D", "r", "ptpp")


def _features(X: np.ndarray) -> Features:
    if X.shape[1] != len(FEATURE_NAMES):
        raise ValueError(f"X must have {len(FEATURE_NAMES)} columns ({', '.join(FEATURE_NAMES)}), got {X.shape[1]}")
    r = np.array([clip_ratio(v) for v in X[:, 2]])
    return Features(X[:, 0], X[:, 1], r, X[:, 3])


class PTPPLawRegressor(RegressorMixin, BaseEstimator):
    """Fit one law form by robust multi-start optimization.

    Parameters mirror :class:`FitConfig`. After ``fit`` the estimator exposes
    ``fit_result_`` (the full :class:`FitResult`), ``params_`` (active
    parameters by name) and ``objective_``.

    ``score`` is the usual R^2 from :class:`RegressorMixin`; it is rarely
    informative for loss curves, prefer :mod:`ptpplaw.metrics`.
    """

    def __init__(self, form="gated-floor", huber_delta=0.02, n_starts=64, seed=0, max_iters=2000):
        self.form = form
        self.huber_delta = huber_delta
        self.n_starts = n_starts
        self.seed = seed
        self.max_iters = max_iters

    def _config(self) -> FitConfig:
        return FitConfig(
            huber_delta=self.huber_delta, n_starts=self.n_starts, seed=self.seed, max_iters=self.max_iters
        )

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=float, y_numeric=True)
        form = LawForm.parse(self.form)
        result = fit_arrays(_features(X), y, form, self._config())
        self.fit_result_ = result
        self.form_ = form
        self.params_ = {n: result.params.get(n) for n in form.active}
        self.objective_ = result.objective
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "fit_result_")
        X = check_array(X, dtype=float)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        f = _features(X)
        return self.fit_result_.predict(f.N, f.D, f.r, f.ptpp)

    @classmethod
    def from_result(cls, result: FitResult) -> "PTPPLawRegressor":
        """Wrap a stored fit without refitting."""
        est = cls(form=result.form.value, seed=result.seed)
        est.fit_result_ = result
        est.form_ = result.form
        est.params_ = {n: result.params.get(n) for n in result.form.active}
        est.objective_ = result.objective
        est.n_features_in_ = len(FEATURE_NAMES)
        return est
