"""scikit-learn compatible wrappers around the trainer and the prior bank."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import Dataset, batches
from .prior import PosteriorBatch, PriorMode, init_bank, regularizer_terms, responsibilities, update_bank
from .trainer import TrainConfig, fit_models, predict_proba


class GMMDLClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Stochastic-encoder classifier with a selectable latent regularizer.

    ``reg`` is one of ``none``, ``vib``, ``cdvib``, ``gm-lossless`` or
    ``gm-lossy``. After ``fit``, ``transform`` returns the posterior means and
    ``prior_`` holds the learned Gaussian mixture bank (bank kinds only).
    """

    def __init__(
        self,
        reg="gm-lossy",
        beta=0.01,
        hidden_dim=64,
        latent_dim=16,
        n_components=20,
        eps=0.1,
        lossless_estimator="var",
        lossy_estimator="est",
        epochs=30,
        batch_size=128,
        lr=1e-4,
        lr_decay=0.97,
        optimizer="adam",
        k_train=1,
        k_eval=12,
        eta=(1e-2, 5e-4, 1e-2),
        zeta=(0.0, 0.0),
        init_batch_size=2048,
        var_floor=1e-8,
        random_state=0,
    ):
        self.reg = reg
        self.beta = beta
        self.hidden_dim = hidden_dim
        self.latent_dim = latent_dim
        self.n_components = n_components
        self.eps = eps
        self.lossless_estimator = lossless_estimator
        self.lossy_estimator = lossy_estimator
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.lr_decay = lr_decay
        self.optimizer = optimizer
        self.k_train = k_train
        self.k_eval = k_eval
        self.eta = eta
        self.zeta = zeta
        self.init_batch_size = init_batch_size
        self.var_floor = var_floor
        self.random_state = random_state

    def _config(self) -> TrainConfig:
        return TrainConfig(
            reg=self.reg,
            beta=self.beta,
            hidden_dim=self.hidden_dim,
            latent_dim=self.latent_dim,
            n_components=self.n_components,
            eps=self.eps,
            lossless_estimator=self.lossless_estimator,
            lossy_estimator=self.lossy_estimator,
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            lr_decay=self.lr_decay,
            optimizer=self.optimizer,
            k_train=self.k_train,
            k_eval=self.k_eval,
            eta=self.eta,
            zeta=self.zeta,
            init_batch_size=self.init_batch_size,
            var_floor=self.var_floor,
            seed=int(self.random_state or 0),
        )

    def fit(self, X, y, X_val=None, y_val=None):
        X, y = check_X_y(X, y, dtype=np.float64)
        check_classification_targets(y)
        self._label_encoder = LabelEncoder().fit(y)
        self.classes_ = self._label_encoder.classes_
        if self.classes_.size < 2:
            raise ValueError(f"need samples from at least two classes, got {self.classes_.size} class")
        train = Dataset(X, self._label_encoder.transform(y), split="train")
        if X_val is not None:
            X_val, y_val = check_X_y(X_val, y_val, dtype=np.float64)
            test = Dataset(X_val, self._label_encoder.transform(y_val), split="test")
        else:
            test = Dataset(np.empty((0, X.shape[1])), np.empty(0, dtype=int), split="test")
        result = fit_models(self._config(), train, test, num_classes=self.classes_.size)
        self.encoder_ = result.encoder
        self.decoder_ = result.decoder
        self.prior_ = result.bank
        self.history_ = result.metrics
        self.n_features_in_ = X.shape[1]
        return self

    def _rng(self):
        return np.random.default_rng([int(self.random_state or 0), 7])

    def _check_input(self, X):
        check_is_fitted(self, "encoder_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(
                f"X has {X.shape[1]} features, but {type(self).__name__} is expecting "
                f"{self.n_features_in_} features as input"
            )
        return X

    def predict_proba(self, X):
        X = self._check_input(X)
        return predict_proba(self.encoder_, self.decoder_, X, self._rng(), self.k_eval, shared_noise=True)

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]

    def transform(self, X):
        """Posterior means of the latent representation."""
        mu, _, _ = self.encoder_.encode(self._check_input(X))
        return mu

    def posterior(self, X):
        """(means, variances) of the per-input latent Gaussians."""
        mu, var, _ = self.encoder_.encode(self._check_input(X))
        return mu, var


def split_posteriors(X):
    """Split rows ``mu_1..mu_d, var_1..var_d`` into (means, variances)."""
    X = check_array(X, dtype=np.float64)
    if X.shape[1] % 2:
        raise ValueError("expected an even number of columns: d means followed by d variances")
    d = X.shape[1] // 2
    means, var = X[:, :d], X[:, d:]
    if np.any(var <= 0):
        raise ValueError("variance columns must be positive")
    return means, var


class GaussianMixturePrior(BaseEstimator):
    """Fit the per-class mixture bank to a fixed set of encoder posteriors.

    ``X`` rows are ``mu_1..mu_d, var_1..var_d`` and ``y`` the class labels.
    Each iteration sweeps shuffled minibatches through the
    responsibilities, closed-form proposal and moving-average update.
    """

    def __init__(
        self,
        n_components=20,
        mode="lossless-var",
        eta=(1e-2, 5e-4, 1e-2),
        zeta=(0.0, 0.0),
        eps=0.0,
        n_iter=50,
        batch_size=128,
        init_batch_size=2048,
        var_floor=1e-8,
        random_state=0,
    ):
        self.n_components = n_components
        self.mode = mode
        self.eta = eta
        self.zeta = zeta
        self.eps = eps
        self.n_iter = n_iter
        self.batch_size = batch_size
        self.init_batch_size = init_batch_size
        self.var_floor = var_floor
        self.random_state = random_state

    def fit(self, X, y):
        means, var = split_posteriors(X)
        _, y = check_X_y(means, y)
        self._label_encoder = LabelEncoder().fit(y)
        self.classes_ = self._label_encoder.classes_
        labels = self._label_encoder.transform(y)
        mode = PriorMode(self.mode)
        seed = int(self.random_state or 0)
        rng = np.random.default_rng(seed)
        n = labels.size
        big = min(self.init_batch_size, n)

        def view(idx):
            return PosteriorBatch(labels[idx], means[idx], var[idx])

        bank = init_bank(
            self.classes_.size,
            self.n_components,
            view,
            lambda r: r.choice(n, size=big, replace=False),
            rng,
            eta=tuple(self.eta),
            zeta=tuple(self.zeta),
            eps=self.eps,
            var_floor=self.var_floor,
        )
        for it in range(self.n_iter):
            for idx in batches(n, self.batch_size, seed, it):
                bank = update_bank(view(idx), bank, mode, rng)
        self.bank_ = bank
        self.n_features_in_ = 2 * means.shape[1]
        return self

    def _batch(self, X, y):
        check_is_fitted(self, "bank_")
        means, var = split_posteriors(X)
        return PosteriorBatch(self._label_encoder.transform(np.asarray(y)), means, var)

    def responsibilities(self, X, y):
        return responsibilities(self._batch(X, y), self.bank_, self.mode)

    def score_samples(self, X, y):
        """Per-sample regularizer value (estimated KL to the class prior, nats)."""
        values, _, _ = regularizer_terms(self._batch(X, y), self.bank_, self.mode)
        return values

    def score(self, X, y):
        return -float(np.mean(self.score_samples(X, y)))
