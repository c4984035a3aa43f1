"""Stochastic encoder / linear decoder training with manual backpropagation.

Encoder: x -> tanh(W1 x + b1) -> (mu, rho), sigma = softplus(rho).
Decoder: u -> softmax(Wd u + bd), u = mu + sigma * xi.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields
from enum import Enum

import numpy as np
from scipy.special import expit, log_softmax, softmax

from .data import Dataset, batches
from .gaussian import VAR_FLOOR, DiagGaussian
from .prior import PosteriorBatch, PriorBank, PriorMode, init_bank, regularizer_terms, update_bank

SIGMA_FLOOR = 1e-12


class RegKind(str, Enum):
    NONE = "none"
    VIB = "vib"
    CDVIB = "cdvib"
    GM_LOSSLESS = "gm-lossless"
    GM_LOSSY = "gm-lossy"

    @property
    def uses_bank(self) -> bool:
        return self in (RegKind.CDVIB, RegKind.GM_LOSSLESS, RegKind.GM_LOSSY)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class EncoderModel:
    W1: np.ndarray
    b1: np.ndarray
    W_mu: np.ndarray
    b_mu: np.ndarray
    W_rho: np.ndarray
    b_rho: np.ndarray

    @classmethod
    def init(cls, input_dim: int, hidden_dim: int, latent_dim: int, rng) -> "EncoderModel":
        return cls(
            _xavier(rng, hidden_dim, input_dim),
            np.zeros(hidden_dim),
            _xavier(rng, latent_dim, hidden_dim),
            np.zeros(latent_dim),
            _xavier(rng, latent_dim, hidden_dim),
            np.zeros(latent_dim),
        )

    def encode(self, X):
        """Return (mu, var, cache) for a batch of inputs."""
        h = np.tanh(X @ self.W1.T + self.b1)
        mu = h @ self.W_mu.T + self.b_mu
        rho = h @ self.W_rho.T + self.b_rho
        sigma = np.logaddexp(0.0, rho) + SIGMA_FLOOR
        return mu, sigma**2, (X, h, rho, sigma)


@dataclass
class DecoderModel:
    W: np.ndarray
    b: np.ndarray

    @classmethod
    def init(cls, latent_dim: int, num_classes: int, rng) -> "DecoderModel":
        return cls(_xavier(rng, num_classes, latent_dim), np.zeros(num_classes))

    def logits(self, U):
        return U @ self.W.T + self.b


def _xavier(rng, fan_out, fan_in):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


def parameters(enc: EncoderModel, dec: DecoderModel) -> dict[str, np.ndarray]:
    """Name -> array views of every trainable parameter, in a fixed order."""
    out = {f"enc.{f.name}": getattr(enc, f.name) for f in fields(enc)}
    out.update({f"dec.{f.name}": getattr(dec, f.name) for f in fields(dec)})
    return out


@dataclass
class TrainConfig:
    dataset: str = "synth"
    hidden_dim: int = 64
    latent_dim: int = 16
    n_components: int = 20
    reg: RegKind = RegKind.NONE
    beta: float = 0.0
    eps: float = 0.1
    lossless_estimator: str = "var"
    lossy_estimator: str = "est"
    epochs: int = 200
    batch_size: int = 128
    lr: float = 1e-4
    lr_decay: float = 0.97
    optimizer: str = "adam"
    adam_betas: tuple[float, float] = (0.5, 0.999)
    momentum: float = 0.9
    seed: int = 0
    k_train: int = 1
    k_eval: int = 12
    eta: tuple[float, float, float] = (1e-2, 5e-4, 1e-2)
    zeta: tuple[float, float] = (0.0, 0.0)
    init_batch_size: int = 2048
    var_floor: float = VAR_FLOOR

    def __post_init__(self):
        self.reg = RegKind(self.reg)
        for name in ("hidden_dim", "latent_dim", "n_components", "batch_size", "k_train", "k_eval", "init_batch_size"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.epochs < 0 or self.beta < 0 or self.eps < 0 or self.lr <= 0:
            raise ValueError("epochs, beta and eps must be nonnegative and lr positive")
        if self.var_floor <= 0:
            raise ValueError("var_floor must be positive")
        if self.lossless_estimator not in ("var", "est") or self.lossy_estimator not in ("var", "est"):
            raise ValueError("estimators must be 'var' or 'est'")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")
        self.adam_betas = tuple(self.adam_betas)
        self.eta = tuple(self.eta)
        self.zeta = tuple(self.zeta)

    @property
    def prior_mode(self) -> PriorMode | None:
        if self.reg is RegKind.CDVIB:
            return PriorMode.LOSSLESS_VAR
        if self.reg is RegKind.GM_LOSSLESS:
            return PriorMode(f"lossless-{self.lossless_estimator}")
        if self.reg is RegKind.GM_LOSSY:
            return PriorMode(f"lossy-{self.lossy_estimator}")
        return None

    @property
    def bank_components(self) -> int:
        return 1 if self.reg is RegKind.CDVIB else self.n_components

    def to_dict(self) -> dict:
        d = asdict(self)
        d["reg"] = self.reg.value
        return d


def vib_regularizer(mu, var):
    """Per-sample KL to N(0, I) and its gradients w.r.t. mu and var."""
    values = 0.5 * np.sum(var + mu**2 - 1.0 - np.log(var), axis=1)
    return values, mu.copy(), 0.5 * (1.0 - 1.0 / var)


def _regularize(kind: RegKind, mu, var, labels, bank, mode):
    if kind is RegKind.VIB:
        return vib_regularizer(mu, var)
    if mode is None:
        mode = TrainConfig(reg=kind).prior_mode
    return regularizer_terms(PosteriorBatch(labels, mu, var), bank, mode)


@dataclass
class StepResult:
    loss: float
    grads: dict[str, np.ndarray]
    reg_value: float
    mu: np.ndarray
    var: np.ndarray


def loss_and_grads(
    X,
    y,
    enc: EncoderModel,
    dec: DecoderModel,
    reg_kind,
    beta: float,
    bank: PriorBank | None,
    rng: np.random.Generator,
    k: int = 1,
    mode=None,
) -> StepResult:
    """Mean cross-entropy over k latent draws plus beta * (regularizer sum / batch size).

    The decoder always sees the undistorted latent; lossy perturbation only
    enters through the regularizer. The bank is held constant.
    """
    reg_kind = RegKind(reg_kind)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=np.int64)
    b = X.shape[0]
    mu, var, (_, h, rho, sigma) = enc.encode(X)
    xi = rng.standard_normal((k,) + mu.shape)
    U = mu[None] + sigma[None] * xi
    logits = dec.logits(U)
    logp = log_softmax(logits, axis=-1)
    ce = -float(np.mean(logp[:, np.arange(b), y]))

    d_logits = np.exp(logp)
    d_logits[:, np.arange(b), y] -= 1.0
    d_logits /= k * b
    grads = {
        "dec.W": np.einsum("kbc,kbd->cd", d_logits, U),
        "dec.b": d_logits.sum(axis=(0, 1)),
    }
    dU = d_logits @ dec.W
    d_mu = dU.sum(axis=0)
    d_sigma = np.sum(dU * xi, axis=0)

    reg_value = 0.0
    active = reg_kind is not RegKind.NONE and beta > 0
    if active:
        if reg_kind.uses_bank and bank is None:
            raise ValueError(f"{reg_kind.value} needs a prior bank")
        values, g_mu, g_var = _regularize(reg_kind, mu, var, y, bank, mode)
        reg_value = float(np.sum(values))
        scale = beta / b
        d_mu = d_mu + scale * g_mu
        d_sigma = d_sigma + scale * g_var * 2.0 * sigma
    loss = ce + (beta * reg_value / b if active else 0.0)
    if not math.isfinite(loss):
        raise TrainingDiverged(f"non-finite loss (cross-entropy={ce}, regularizer={reg_value})")

    d_rho = d_sigma * expit(rho)
    grads["enc.W_mu"] = d_mu.T @ h
    grads["enc.b_mu"] = d_mu.sum(axis=0)
    grads["enc.W_rho"] = d_rho.T @ h
    grads["enc.b_rho"] = d_rho.sum(axis=0)
    d_a = (d_mu @ enc.W_mu + d_rho @ enc.W_rho) * (1.0 - h**2)
    grads["enc.W1"] = d_a.T @ X
    grads["enc.b1"] = d_a.sum(axis=0)
    return StepResult(loss, grads, reg_value, mu, var)


def predict_proba(enc: EncoderModel, dec: DecoderModel, X, rng, k: int, shared_noise: bool = False):
    """Class probabilities averaged over k reparameterized latent draws.

    With ``shared_noise`` every row reuses the same k standard-normal vectors,
    so a row's output does not depend on the other rows in ``X``.
    """
    mu, _, (_, _, _, sigma) = enc.encode(np.atleast_2d(X))
    xi = rng.standard_normal((k, 1, mu.shape[1]) if shared_noise else (k,) + mu.shape)
    return softmax(dec.logits(mu[None] + sigma[None] * xi), axis=-1).mean(axis=0)


def forward(enc: EncoderModel, dec: DecoderModel, x, rng, k: int = 1):
    """Posterior and sample-averaged class probabilities for one input vector."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.shape[0] != enc.W1.shape[1]:
        raise ValueError(f"expected an input vector of length {enc.W1.shape[1]}")
    mu, var, _ = enc.encode(x[None])
    return DiagGaussian(mu[0], var[0]), predict_proba(enc, dec, x[None], rng, k)[0]


def evaluate(enc: EncoderModel, dec: DecoderModel, dataset: Dataset, k_eval: int, rng, chunk: int = 4096) -> float:
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    correct = 0
    for start in range(0, len(dataset), chunk):
        X = dataset.features[start : start + chunk]
        probs = predict_proba(enc, dec, X, rng, k_eval)
        correct += int(np.sum(np.argmax(probs, axis=1) == dataset.labels[start : start + chunk]))
    return correct / len(dataset)


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float, betas=(0.5, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name, p in self.params.items():
            g = grads[name]
            self.m[name] = self.b1 * self.m[name] + (1.0 - self.b1) * g
            self.v[name] = self.b2 * self.v[name] + (1.0 - self.b2) * g * g
            p -= self.lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)


class MomentumSGD:
    def __init__(self, params: dict[str, np.ndarray], lr: float, momentum: float = 0.9):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.vel = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]):
        for name, p in self.params.items():
            self.vel[name] = self.momentum * self.vel[name] + grads[name]
            p -= self.lr * self.vel[name]


METRIC_COLUMNS = ("epoch", "train_loss", "train_acc", "test_acc", "reg_value", "gap")


@dataclass
class RunMetrics:
    epoch: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    train_acc: list[float] = field(default_factory=list)
    test_acc: list[float] = field(default_factory=list)
    reg_value: list[float] = field(default_factory=list)
    gap: list[float] = field(default_factory=list)

    def append(self, **row):
        for name in METRIC_COLUMNS:
            getattr(self, name).append(row[name])

    def __len__(self):
        return len(self.epoch)

    def rows(self):
        return list(zip(*(getattr(self, c) for c in METRIC_COLUMNS)))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for row in self.rows():
            w.writerow([row[0]] + [f"{v:.12g}" for v in row[1:]])
        return buf.getvalue()

    def summary(self) -> dict:
        if not len(self):
            return {"epochs": 0}
        return {
            "epochs": len(self),
            "final_train_loss": self.train_loss[-1],
            "final_train_acc": self.train_acc[-1],
            "final_test_acc": self.test_acc[-1],
            "final_reg_value": self.reg_value[-1],
            "final_gap": self.gap[-1],
        }


@dataclass
class TrainResult:
    metrics: RunMetrics
    encoder: EncoderModel
    decoder: DecoderModel
    bank: PriorBank | None
    initial_bank: PriorBank | None


def _streams(seed: int):
    init_ss, noise_ss, bank_ss, eval_ss = np.random.SeedSequence(seed).spawn(4)
    return (
        np.random.default_rng(init_ss),
        np.random.default_rng(noise_ss),
        np.random.default_rng(bank_ss),
        eval_ss,
    )


def _initial_bank(config, enc, train: Dataset, rng, num_classes: int) -> PriorBank:
    big = min(config.init_batch_size, len(train))

    def source(r):
        return r.choice(len(train), size=big, replace=False)

    def view(idx):
        mu, var, _ = enc.encode(train.features[idx])
        return PosteriorBatch(train.labels[idx], mu, var)

    return init_bank(
        num_classes,
        config.bank_components,
        view,
        source,
        rng,
        eta=config.eta,
        zeta=config.zeta,
        eps=config.eps,
        var_floor=config.var_floor,
    )


def fit_models(config: TrainConfig, train: Dataset, test: Dataset, num_classes: int | None = None) -> TrainResult:
    """Train encoder and decoder; deterministic given ``config.seed``.

    With ``beta == 0`` the regularizer is inactive: it is neither evaluated nor
    used to update the bank, so every regularizer kind follows the same
    trajectory.
    """
    if len(train) == 0:
        raise ValueError("empty training set")
    C = num_classes or max(train.num_classes, test.num_classes if len(test) else 0)
    init_rng, noise_rng, bank_rng, eval_ss = _streams(config.seed)
    enc = EncoderModel.init(train.n_features, config.hidden_dim, config.latent_dim, init_rng)
    dec = DecoderModel.init(config.latent_dim, C, init_rng)
    params = parameters(enc, dec)
    if config.optimizer == "adam":
        opt = Adam(params, config.lr, config.adam_betas)
    else:
        opt = MomentumSGD(params, config.lr, config.momentum)

    mode = config.prior_mode
    active = config.reg is not RegKind.NONE and config.beta > 0
    bank = _initial_bank(config, enc, train, bank_rng, C) if config.reg.uses_bank and active else None
    initial_bank = bank
    metrics = RunMetrics()
    for epoch in range(config.epochs):
        loss_sum = reg_sum = 0.0
        for idx in batches(len(train), config.batch_size, config.seed, epoch):
            X, y = train.features[idx], train.labels[idx]
            step = loss_and_grads(X, y, enc, dec, config.reg, config.beta, bank, noise_rng, config.k_train, mode)
            opt.step(step.grads)
            if bank is not None:
                bank = update_bank(PosteriorBatch(y, step.mu, step.var), bank, mode, bank_rng)
            loss_sum += step.loss * len(idx)
            reg_sum += step.reg_value
        opt.lr *= config.lr_decay
        eval_rng = np.random.default_rng(np.random.SeedSequence(eval_ss.entropy, spawn_key=(3, epoch)))
        train_acc = evaluate(enc, dec, train, config.k_eval, eval_rng)
        test_acc = evaluate(enc, dec, test, config.k_eval, eval_rng) if len(test) else float("nan")
        metrics.append(
            epoch=epoch + 1,
            train_loss=loss_sum / len(train),
            train_acc=train_acc,
            test_acc=test_acc,
            reg_value=reg_sum / len(train),
            gap=train_acc - test_acc,
        )
    return TrainResult(metrics, enc, dec, bank, initial_bank)


def train(config: TrainConfig, data: tuple[Dataset, Dataset]) -> RunMetrics:
    train_ds, test_ds = data
    return fit_models(config, train_ds, test_ds).metrics


def run_summary(config: TrainConfig, metrics: RunMetrics) -> str:
    return json.dumps({"config": config.to_dict(), "metrics": metrics.summary()}, indent=2, sort_keys=True)
