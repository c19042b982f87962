"""JSON run configuration shared by the CLI subcommands.

Every key is optional; omitted keys keep the dataclass defaults.
Unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .losses import LossConfig
from .phantom import PhantomSpec
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CohortSection:
    n: int = 24
    seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    cohort: CohortSection = field(default_factory=CohortSection)
    paths: dict = field(default_factory=dict)


_PATH_KEYS = {"data_dir", "out_dir", "manifest", "split_file"}


def _fields(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


def _check_keys(section: str, given: dict, allowed: set[str]) -> None:
    unknown = sorted(set(given) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")


def _tupled(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def parse_run_config(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    _check_keys("top level", doc, {"train", "loss", "phantom", "cohort", "paths"})
    train = dict(doc.get("train", {}))
    _check_keys("train", train, _fields(TrainConfig) - {"loss"})
    loss = dict(doc.get("loss", {}))
    if "lambda" in loss:
        loss["lam"] = loss.pop("lambda")
    _check_keys("loss", loss, _fields(LossConfig))
    phantom = doc.get("phantom", {})
    _check_keys("phantom", phantom, _fields(PhantomSpec))
    cohort = doc.get("cohort", {})
    _check_keys("cohort", cohort, _fields(CohortSection))
    paths = doc.get("paths", {})
    _check_keys("paths", paths, _PATH_KEYS)
    try:
        return RunConfig(
            train=TrainConfig(loss=LossConfig(**loss), **_tupled(train)),
            phantom=PhantomSpec(**_tupled(phantom)),
            cohort=CohortSection(**cohort),
            paths=dict(paths),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_run_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return parse_run_config(doc)
