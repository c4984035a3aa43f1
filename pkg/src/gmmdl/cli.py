"""Command-line entry point: ``gmmdl <command> [flags]``.

Configuration is merged as defaults <- JSON file (``--config``) <- flags.
Every artifact is written atomically; failures print a one-line JSON error
on stderr and exit nonzero.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import bounds
from .checks import gradcheck_report, kl_sandwich_report
from .data import DATA_DIR_ENV, load_usps, read_posterior_csv, standardize, synth_blobs
from .estimators import GaussianMixturePrior
from .prior import PriorMode
from .trainer import RegKind, TrainConfig, run_summary, train

COMMANDS = ("bounds-curve", "bounds-residual", "kl-check", "prior-fit", "train", "gradcheck")
EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2


class ConfigError(ValueError):
    pass


class CheckFailed(RuntimeError):
    pass


def _grid(start, stop, step):
    return [round(float(v), 10) for v in np.arange(start, stop + step / 2, step)]


@dataclass
class CliConfig:
    out: str = "out"
    seeds: list = field(default_factory=lambda: [0])
    workers: int = 1
    # data
    dataset: str = "synth"
    data_dir: str | None = None
    synth_classes: int = 10
    synth_dim: int = 64
    synth_per_class: int = 100
    synth_separation: float = 3.0
    synth_noise: float = 1.0
    # training
    regs: list = field(default_factory=lambda: ["gm-lossy"])
    betas: list = field(default_factory=lambda: [0.01])
    hidden_dim: int = 64
    latent_dim: int = 16
    n_components: int = 20
    eps: float = 0.1
    lossless_estimator: str = "var"
    lossy_estimator: str = "est"
    epochs: int = 200
    batch_size: int = 128
    lr: float = 1e-4
    lr_decay: float = 0.97
    optimizer: str = "adam"
    adam_betas: list = field(default_factory=lambda: [0.5, 0.999])
    momentum: float = 0.9
    k_train: int = 1
    k_eval: int = 12
    eta: list = field(default_factory=lambda: [1e-2, 5e-4, 1e-2])
    zeta: list = field(default_factory=lambda: [0.0, 0.0])
    init_batch_size: int = 2048
    var_floor: float = 1e-8
    # prior-fit
    input: str | None = None
    prior_mode: str = "lossless-var"
    n_iter: int = 50
    # bounds
    base: str = "bits"
    n: int = 50000
    num_classes: int = 10
    emp_risk: float = 0.05
    emp_risks: list = field(default_factory=lambda: [0.0, 0.01, 0.02, 0.05, 0.1])
    mdl_rates: list = field(default_factory=lambda: _grid(0.0, 0.2, 0.01))
    gen_grid: list = field(default_factory=lambda: _grid(0.01, 0.3, 0.01))
    # checks
    trials: int = 200
    samples: int = 200_000
    max_dim: int = 8
    max_components: int = 5
    tolerance: float = 1e-4

    def train_config(self, reg, beta, seed) -> TrainConfig:
        shared = {f.name for f in fields(TrainConfig)} & {f.name for f in fields(self)}
        kwargs = {k: getattr(self, k) for k in shared}
        return TrainConfig(reg=reg, beta=beta, seed=seed, **kwargs)


_ALIASES = {"seed": "seeds", "beta": "betas", "reg": "regs", "components": "n_components"}

_CHOICES = {
    "dataset": ("synth", "usps"),
    "regs": tuple(k.value for k in RegKind),
    "lossless_estimator": ("var", "est"),
    "lossy_estimator": ("var", "est"),
    "optimizer": ("adam", "sgd"),
    "prior_mode": tuple(m.value for m in PriorMode),
    "base": tuple(b.value for b in bounds.LogBase),
}
_LIST_TYPES = {
    "seeds": int, "regs": str, "betas": float, "adam_betas": float, "eta": float, "zeta": float,
    "emp_risks": float, "mdl_rates": float, "gen_grid": float,
}
_LIST_LENGTHS = {"adam_betas": 2, "eta": 3, "zeta": 2}
_OPTIONAL = {"data_dir", "input"}


def _scalar_type(name):
    default = CliConfig.__dataclass_fields__[name].default
    return type(default) if default is not None else str


def _check_type(name, value, typ):
    if typ is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        return float(value) if ok else _type_error(name, value, "number")
    if typ is int:
        return value if isinstance(value, int) and not isinstance(value, bool) else _type_error(name, value, "integer")
    return value if isinstance(value, str) else _type_error(name, value, "string")


def _type_error(name, value, expected):
    raise ConfigError(f"{name}: expected {expected}, got {value!r}")


def _coerce(name, value):
    if name in _OPTIONAL and value is None:
        return None
    if name in _LIST_TYPES:
        items = value if isinstance(value, list) else [value]
        items = [_check_type(name, v, _LIST_TYPES[name]) for v in items]
        if not items:
            raise ConfigError(f"{name}: list must not be empty")
        if name in _LIST_LENGTHS and len(items) != _LIST_LENGTHS[name]:
            raise ConfigError(f"{name}: expected {_LIST_LENGTHS[name]} values, got {len(items)}")
        return items
    return _check_type(name, value, _scalar_type(name))


def _validate(cfg: CliConfig):
    for name, allowed in _CHOICES.items():
        values = getattr(cfg, name)
        for v in values if isinstance(values, list) else [values]:
            if v not in allowed:
                raise ConfigError(f"{name}: {v!r} not one of {', '.join(allowed)}")
    positive_ints = (
        "workers", "synth_classes", "synth_dim", "synth_per_class", "hidden_dim", "latent_dim",
        "n_components", "batch_size", "k_train", "k_eval", "init_batch_size", "trials", "max_dim",
        "max_components", "n_iter",
    )
    for name in positive_ints:
        if getattr(cfg, name) < 1:
            raise ConfigError(f"{name}: must be >= 1")
    for name in ("epochs", "synth_separation", "synth_noise", "eps"):
        if getattr(cfg, name) < 0:
            raise ConfigError(f"{name}: must be >= 0")
    for name in ("lr", "lr_decay", "var_floor", "tolerance"):
        if getattr(cfg, name) <= 0:
            raise ConfigError(f"{name}: must be > 0")
    if any(s < 0 for s in cfg.seeds):
        raise ConfigError("seeds: must be >= 0")
    if any(b < 0 for b in cfg.betas):
        raise ConfigError("betas: must be >= 0")
    if cfg.samples < 1000:
        raise ConfigError("samples: must be >= 1000")
    if cfg.n < 10:
        raise ConfigError("n: must be >= 10")
    if cfg.num_classes < 2:
        raise ConfigError("num_classes: must be >= 2")
    for name in ("emp_risks", "mdl_rates", "gen_grid", "eta"):
        if any(not 0.0 <= v <= 1.0 for v in getattr(cfg, name)):
            raise ConfigError(f"{name}: values must lie in [0, 1]")
    if not 0.0 <= cfg.emp_risk <= 1.0:
        raise ConfigError("emp_risk: must lie in [0, 1]")
    if any(z < 0 for z in cfg.zeta):
        raise ConfigError("zeta: must be >= 0")
    if any(not 0.0 <= b < 1.0 for b in cfg.adam_betas) or not 0.0 <= cfg.momentum < 1.0:
        raise ConfigError("adam_betas and momentum must lie in [0, 1)")


def parse_config(path=None, flags: dict | None = None) -> CliConfig:
    """Merge defaults, an optional JSON file and explicit flag values."""
    known = {f.name for f in fields(CliConfig)}
    merged = {}
    for source, layer in (("config file", _read_json(path) if path else {}), ("flags", flags or {})):
        if not isinstance(layer, dict):
            raise ConfigError(f"{source}: expected a JSON object")
        for key, value in layer.items():
            name = _ALIASES.get(key, key).replace("-", "_")
            if name not in known:
                raise ConfigError(f"unknown config key {key!r}")
            merged[name] = _coerce(name, value)
    cfg = CliConfig(**merged)
    _validate(cfg)
    return cfg


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None


def atomic_write(path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# commands ---------------------------------------------------------------


def cmd_bounds_curve(cfg: CliConfig) -> dict:
    rows = bounds.curve_fig3(cfg.n, cfg.num_classes, cfg.emp_risks, cfg.mdl_rates, cfg.base)
    path = Path(cfg.out) / "fig3.csv"
    atomic_write(path, bounds.format_csv(bounds.FIG3_HEADER, rows))
    return {"artifacts": [str(path)], "rows": len(rows)}


def cmd_bounds_residual(cfg: CliConfig) -> dict:
    rows = bounds.curve_fig2(cfg.n, cfg.num_classes, cfg.emp_risk, cfg.gen_grid, cfg.base)
    path = Path(cfg.out) / "fig2.csv"
    atomic_write(path, bounds.format_csv(bounds.FIG2_HEADER, rows))
    return {"artifacts": [str(path)], "rows": len(rows)}


def cmd_kl_check(cfg: CliConfig) -> dict:
    report = kl_sandwich_report(cfg.trials, cfg.samples, cfg.max_dim, cfg.max_components, cfg.seeds[0])
    path = Path(cfg.out) / "kl_check.json"
    atomic_write(path, _dump(report))
    if not report["passed"]:
        raise CheckFailed(f"sandwich pass rate {report['pass_rate']:.3f} below 0.99 (report at {path})")
    return {"artifacts": [str(path)], "pass_rate": report["pass_rate"]}


def cmd_prior_fit(cfg: CliConfig) -> dict:
    if not cfg.input:
        raise ConfigError("prior-fit needs --input <posterior CSV>")
    X, y = read_posterior_csv(cfg.input)
    est = GaussianMixturePrior(
        n_components=cfg.n_components,
        mode=cfg.prior_mode,
        eta=tuple(cfg.eta),
        zeta=tuple(cfg.zeta),
        eps=cfg.eps,
        n_iter=cfg.n_iter,
        batch_size=cfg.batch_size,
        init_batch_size=cfg.init_batch_size,
        var_floor=cfg.var_floor,
        random_state=cfg.seeds[0],
    ).fit(X, y)
    path = Path(cfg.out) / "prior_bank.json"
    atomic_write(path, est.bank_.to_json() + "\n")
    return {"artifacts": [str(path)], "classes": [int(c) for c in est.classes_]}


def load_data(cfg: CliConfig):
    """Standardized (train, test) and a description of where they came from."""
    if cfg.dataset == "usps":
        data = load_usps(cfg.data_dir)
        if data is not None:
            return standardize(*data), "usps"
        print(
            f"usps files not found (set {DATA_DIR_ENV} or --data-dir); using synthetic blobs",
            file=sys.stderr,
        )
    data = synth_blobs(
        cfg.synth_classes, cfg.synth_dim, cfg.synth_per_class, cfg.synth_separation, cfg.synth_noise, seed=0
    )
    return standardize(*data), "synth"


def run_name(reg, beta, seed) -> str:
    return f"{reg}_beta{beta:g}_seed{seed}"


def _train_job(cfg_dict: dict, reg: str, beta: float, seed: int) -> dict:
    cfg = CliConfig(**cfg_dict)
    (train_ds, test_ds), source = load_data(cfg)
    tcfg = cfg.train_config(reg, beta, seed)
    tcfg.dataset = source
    metrics = train(tcfg, (train_ds, test_ds))
    stem = Path(cfg.out) / run_name(reg, beta, seed)
    atomic_write(f"{stem}_metrics.csv", metrics.to_csv())
    atomic_write(f"{stem}_summary.json", run_summary(tcfg, metrics) + "\n")
    return {"reg": reg, "beta": beta, "seed": seed, "source": source, **metrics.summary()}


SUMMARY_COLUMNS = ("reg", "beta", "runs", "final_test_acc_mean", "final_test_acc_std", "final_gap_mean", "final_reg_value_mean")


def summary_table(results: list[dict]) -> str:
    groups: dict = {}
    for r in results:
        groups.setdefault((r["reg"], r["beta"]), []).append(r)
    rows = []
    for (reg, beta), rs in groups.items():
        acc = np.array([r["final_test_acc"] for r in rs])
        rows.append(
            (
                reg,
                beta,
                len(rs),
                float(acc.mean()),
                float(acc.std()),
                float(np.mean([r["final_gap"] for r in rs])),
                float(np.mean([r["final_reg_value"] for r in rs])),
            )
        )
    return bounds.format_csv(SUMMARY_COLUMNS, rows)


def cmd_train(cfg: CliConfig) -> dict:
    jobs = [(reg, beta, seed) for reg in cfg.regs for beta in cfg.betas for seed in cfg.seeds]
    cfg_dict = asdict(cfg)
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_train_job, *zip(*[(cfg_dict, *j) for j in jobs])))
    else:
        results = [_train_job(cfg_dict, *j) for j in jobs]
    path = Path(cfg.out) / "summary.csv"
    atomic_write(path, summary_table(results))
    artifacts = [str(Path(cfg.out) / f"{run_name(*j)}_{kind}") for j in jobs for kind in ("metrics.csv", "summary.json")]
    return {"artifacts": artifacts + [str(path)], "runs": len(jobs)}


def cmd_gradcheck(cfg: CliConfig) -> dict:
    report = gradcheck_report(cfg.seeds, [RegKind(r) for r in cfg.regs], cfg.tolerance)
    path = Path(cfg.out) / "gradcheck.json"
    atomic_write(path, _dump(report))
    if not report["passed"]:
        raise CheckFailed(f"max relative error {report['max_relative_error']:.3e} above {cfg.tolerance:g}")
    return {"artifacts": [str(path)], "max_relative_error": report["max_relative_error"]}


HANDLERS = {
    "bounds-curve": cmd_bounds_curve,
    "bounds-residual": cmd_bounds_residual,
    "kl-check": cmd_kl_check,
    "prior-fit": cmd_prior_fit,
    "train": cmd_train,
    "gradcheck": cmd_gradcheck,
}


def run_command(cmd: str, cfg: CliConfig) -> dict:
    if cmd not in HANDLERS:
        raise ConfigError(f"unknown command {cmd!r}")
    return HANDLERS[cmd](cfg)


# argument parsing -------------------------------------------------------


def _list_of(typ):
    def parse(text):
        try:
            return [typ(v) for v in text.split(",") if v.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected comma-separated {typ.__name__} values, got {text!r}") from None

    return parse


# (flag, config key, argparse type, help)
_FLAGS = (
    ("--out", "out", str, "output directory"),
    ("--seed", "seeds", _list_of(int), "comma-separated seeds"),
    ("--workers", "workers", int, "parallel worker processes for train"),
    ("--dataset", "dataset", str, "usps or synth"),
    ("--data-dir", "data_dir", str, f"directory holding usps and usps.t (default ${DATA_DIR_ENV})"),
    ("--reg", "regs", _list_of(str), "regularizer kinds: none, vib, cdvib, gm-lossless, gm-lossy"),
    ("--beta", "betas", _list_of(float), "comma-separated regularization weights"),
    ("--components", "n_components", int, "mixture components per class"),
    ("--latent-dim", "latent_dim", int, "latent dimension"),
    ("--hidden-dim", "hidden_dim", int, "encoder hidden width"),
    ("--epochs", "epochs", int, "training epochs"),
    ("--batch-size", "batch_size", int, "minibatch size"),
    ("--lr", "lr", float, "initial learning rate"),
    ("--eps", "eps", float, "lossy distortion level"),
    ("--base", "base", str, "bits or nats"),
    ("--n", "n", int, "sample size for bound curves"),
    ("--classes", "num_classes", int, "number of classes for bound curves"),
    ("--emp-risk", "emp_risk", float, "empirical risk for the residual curve"),
    ("--emp-risks", "emp_risks", _list_of(float), "empirical risks for the bound curve"),
    ("--mdl-rates", "mdl_rates", _list_of(float), "MDL/n grid for the bound curve"),
    ("--gen-grid", "gen_grid", _list_of(float), "generalization error grid for the residual curve"),
    ("--trials", "trials", int, "random cases for kl-check"),
    ("--samples", "samples", int, "Monte Carlo samples per kl-check case"),
    ("--input", "input", str, "posterior CSV for prior-fit"),
    ("--mode", "prior_mode", str, "prior mode for prior-fit"),
    ("--iters", "n_iter", int, "passes over the posteriors in prior-fit"),
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gmmdl", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="JSON file with config keys")
    for flag, key, typ, help_ in _FLAGS:
        parser.add_argument(flag, dest=key, type=typ, default=argparse.SUPPRESS, help=help_)
    return parser


def _emit_error(kind: str, message: str, command=None):
    print(json.dumps({"error": kind, "message": message, "command": command}), file=sys.stderr)


def main(argv=None) -> int:
    parser = build_parser()
    command = None
    try:
        ns = vars(parser.parse_args(argv))
        command = ns.pop("command")
        cfg = parse_config(ns.pop("config", None), ns)
        result = run_command(command, cfg)
    except ConfigError as exc:
        _emit_error("config", str(exc), command)
        return EXIT_USAGE
    except CheckFailed as exc:
        _emit_error("check-failed", str(exc), command)
        return EXIT_FAILED
    except (ValueError, OSError, RuntimeError) as exc:
        _emit_error(type(exc).__name__, str(exc), command)
        return EXIT_FAILED
    print(json.dumps({"command": command, "status": "ok", **result}, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
