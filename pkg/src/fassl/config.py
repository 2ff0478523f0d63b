"""Flat key=value experiment configuration.

The file format is one ``key = value`` per line; blank lines and lines
starting with ``#`` are ignored. Unknown keys and malformed or out-of-range
values are rejected with the offending line number. Flags override file
values, which override defaults.

Matrix keys (``strategies``, ``scopes``, ``local_epochs_list``) are
comma-separated lists; when empty they fall back to the corresponding
single-value key, and ``cells()`` yields the cartesian product.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path

from .aggregation import STRATEGY_KINDS, Strategy
from .errors import ConfigError, ContractError
from .orchestrator import SSL_TASKS, RunConfig
from .ssl_tasks import AugmentPolicy


def _parse_bool(raw: str) -> bool:
    low = raw.lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"expected a boolean, got {raw!r}")


def _choice(*options: str):
    def parse(raw: str) -> str:
        if raw not in options:
            raise ValueError(f"expected one of {options}, got {raw!r}")
        return raw

    return parse


def _positive_int(raw: str) -> int:
    v = int(raw)
    if v < 1:
        raise ValueError(f"expected a positive integer, got {v}")
    return v


def _positive_float(raw: str) -> float:
    v = float(raw)
    if v <= 0:
        raise ValueError(f"expected a positive number, got {v}")
    return v


def _nonneg_float(raw: str) -> float:
    v = float(raw)
    if v < 0:
        raise ValueError(f"expected a non-negative number, got {v}")
    return v


def _unit_fraction(raw: str) -> float:
    v = float(raw)
    if not 0.0 < v <= 1.0:
        raise ValueError(f"expected a value in (0, 1], got {v}")
    return v


def _probability(raw: str) -> float:
    v = float(raw)
    if not 0.0 <= v <= 1.0:
        raise ValueError(f"expected a value in [0, 1], got {v}")
    return v


def _str_list(options: tuple[str, ...]):
    def parse(raw: str) -> tuple[str, ...]:
        items = tuple(s.strip() for s in raw.split(",") if s.strip())
        bad = [s for s in items if s not in options]
        if bad:
            raise ValueError(f"unknown values {bad}, expected from {options}")
        return items

    return parse


def _int_list(raw: str) -> tuple[int, ...]:
    return tuple(_positive_int(s.strip()) for s in raw.split(",") if s.strip())


# key -> (parser, default, help)
SCHEMA: dict[str, tuple] = {
    "rounds": (_positive_int, 100, "federated rounds R"),
    "clients": (_positive_int, 100, "client pool size N"),
    "clients_per_round": (_positive_int, 10, "clients sampled per round s"),
    "local_epochs": (_positive_int, 1, "local epochs E per round"),
    "batch_size": (_positive_int, 64, "local batch size"),
    "lr": (_positive_float, 0.05, "constant SGD learning rate"),
    "ssl_task": (_choice(*SSL_TASKS), "simclr", "pretext task"),
    "strategy": (_choice(*STRATEGY_KINDS), "fedavg", "aggregation strategy"),
    "scope": (_choice("full", "backbone"), "full", "transceived parameter scope"),
    "alpha": (_positive_float, 0.1, "Dirichlet heterogeneity coefficient"),
    "master_seed": (int, 7, "root seed for every stream"),
    "eval_every": (_positive_int, 10, "rounds between downstream evaluations"),
    "k": (_positive_int, 1, "k for retrieval"),
    "workers": (_positive_int, 4, "thread pool size for client training"),
    "fedu_mu": (_positive_float, 0.5, "relative divergence gate for fedu heads"),
    "loss_weight_direction": (_choice("high", "low"), "high", "loss strategy: weigh high- or low-loss clients"),
    "tau": (_positive_float, 0.5, "contrastive temperature"),
    "bt_lambda": (_nonneg_float, 5e-3, "off-diagonal weight of the matching loss"),
    "bt_eps": (_positive_float, 1e-9, "std guard in column standardization"),
    "crop_fraction": (_unit_fraction, 0.7, "time-crop fraction for views"),
    "noise_std": (_nonneg_float, 0.05, "additive view noise std"),
    "band_mask_prob": (_probability, 0.1, "per-band dropout probability"),
    "pretext_classes": (_positive_int, 8, "pretext dataset classes"),
    "pretext_per_class": (_positive_int, 100, "pretext clips per class"),
    "frames": (_positive_int, 32, "frames per clip"),
    "bands": (_positive_int, 16, "bands per clip"),
    "hidden_dim": (_positive_int, 32, "encoder hidden width"),
    "embed_dim": (_positive_int, 16, "backbone embedding width"),
    "projection_dim": (_positive_int, 16, "projection head output width"),
    "feature_layer": (_choice("backbone", "projection"), "backbone", "retrieval feature layer"),
    "metric": (_choice("cosine", "euclidean"), "cosine", "retrieval distance"),
    "out_dir": (str, "results", "output directory (FASSL_OUT env overrides)"),
    "plot": (_parse_bool, False, "emit SVG plots after a run"),
    "strategies": (_str_list(STRATEGY_KINDS), (), "matrix axis; empty = [strategy]"),
    "scopes": (_str_list(("full", "backbone")), (), "matrix axis; empty = [scope]"),
    "local_epochs_list": (_int_list, (), "matrix axis; empty = [local_epochs]"),
}


@dataclass(frozen=True)
class ExperimentSpec:
    """Resolved experiment: one base run plus the sweep axes."""

    values: dict = field(default_factory=dict)

    def __getitem__(self, key: str):
        return self.values[key]

    def base_run_config(self) -> RunConfig:
        return self.run_config_for(self["strategy"], self["scope"], self["local_epochs"])

    def run_config_for(self, strategy: str, scope: str, local_epochs: int) -> RunConfig:
        v = self.values
        try:
            return RunConfig(
                rounds=v["rounds"],
                n_clients=v["clients"],
                clients_per_round=v["clients_per_round"],
                local_epochs=local_epochs,
                batch_size=v["batch_size"],
                lr=v["lr"],
                ssl_task=v["ssl_task"],
                strategy=Strategy(
                    kind=strategy, fedu_mu=v["fedu_mu"], loss_direction=v["loss_weight_direction"]
                ),
                scope=scope,
                alpha=v["alpha"],
                master_seed=v["master_seed"],
                eval_every=v["eval_every"],
                k=v["k"],
                workers=v["workers"],
                tau=v["tau"],
                bt_lambda=v["bt_lambda"],
                bt_eps=v["bt_eps"],
                augment=AugmentPolicy(
                    crop_fraction=v["crop_fraction"],
                    noise_std=v["noise_std"],
                    band_mask_prob=v["band_mask_prob"],
                ),
                frames=v["frames"],
                bands=v["bands"],
                hidden_dim=v["hidden_dim"],
                embed_dim=v["embed_dim"],
                projection_dim=v["projection_dim"],
                pretext_classes=v["pretext_classes"],
                pretext_per_class=v["pretext_per_class"],
                feature_layer=v["feature_layer"],
                metric=v["metric"],
            )
        except ContractError as exc:
            raise ConfigError(str(exc)) from exc

    def matrix_axes(self) -> tuple[tuple[str, ...], tuple[str, ...], tuple[int, ...]]:
        strategies = self["strategies"] or (self["strategy"],)
        scopes = self["scopes"] or (self["scope"],)
        epochs = self["local_epochs_list"] or (self["local_epochs"],)
        return strategies, scopes, epochs

    def cells(self) -> list[tuple[str, RunConfig]]:
        """(cell name, run config) per point of the strategy x scope x E grid."""
        out = []
        for strategy, scope, epochs in itertools.product(*self.matrix_axes()):
            name = f"{self['ssl_task']}-{strategy}-{scope}-e{epochs}"
            out.append((name, self.run_config_for(strategy, scope, epochs)))
        return out


def default_spec() -> ExperimentSpec:
    return ExperimentSpec(values={k: default for k, (_, default, _) in SCHEMA.items()})


def parse_config_text(text: str, source: str = "<config>") -> ExperimentSpec:
    values = {k: default for k, (_, default, _) in SCHEMA.items()}
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw_line!r}")
        key, _, raw_value = line.partition("=")
        key = key.strip()
        raw_value = raw_value.strip()
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        parser = SCHEMA[key][0]
        try:
            values[key] = parser(raw_value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from exc
    spec = ExperimentSpec(values=values)
    spec.base_run_config()  # cross-field validation (s <= N, ...)
    return spec


def parse_config(path: str | Path) -> ExperimentSpec:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config_text(p.read_text(encoding="utf-8"), source=str(p))


def apply_overrides(spec: ExperimentSpec, overrides: dict[str, str]) -> ExperimentSpec:
    """Apply raw flag values on top of a spec (flag > file > default)."""
    values = dict(spec.values)
    for key, raw in overrides.items():
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        parser = SCHEMA[key][0]
        try:
            values[key] = parser(raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for flag --{key.replace('_', '-')}: {exc}") from exc
    spec = ExperimentSpec(values=values)
    spec.base_run_config()
    return spec


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def emit_defaults() -> str:
    """Default config file; parsing it back yields the default spec exactly."""
    lines = ["# experiment configuration (key = value; '#' starts a comment line)"]
    for key, (_, default, doc) in SCHEMA.items():
        if isinstance(default, tuple) and not default:
            lines.append(f"# {key} = <comma list>  ({doc})")
        else:
            lines.append(f"# {doc}")
            lines.append(f"{key} = {_format_value(default)}")
    return "\n".join(lines) + "\n"
