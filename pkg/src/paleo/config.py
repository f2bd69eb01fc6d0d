"""Run configuration: one JSON document, layered.

Precedence, lowest to highest:

1. the packaged ``cyprus-defaults.json``
2. the file given with ``--config`` (deep-merged; unknown keys are errors)
3. the ``PALEO_SEED`` environment variable
4. ``--set section.key=value`` overrides, applied in order
5. dedicated flags such as ``--seed`` or ``--iterations``

The fully resolved document is echoed into every JSON and SVG artifact.
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .data import RULES, SyntheticTruth
from .errors import ConfigurationError
from .infer import McmcConfig, SviConfig
from .model import ModelParams, PriorSettings, TimeGrid, build_priors, prior_mode_curve

SEED_ENV = "PALEO_SEED"
DEFAULTS_NAME = "cyprus-defaults.json"


def load_defaults() -> dict:
    text = resources.files("paleo.configs").joinpath(DEFAULTS_NAME).read_text()
    return json.loads(text)


def deep_merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in out:
            raise ConfigurationError(f"unknown config key {where!r}")
        if isinstance(out[key], dict):
            if not isinstance(value, dict):
                raise ConfigurationError(f"config key {where!r} must be an object")
            out[key] = deep_merge(out[key], value, where + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


def read_config_file(path: str | Path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigurationError(f"config file {path} must hold a JSON object")
    return doc


def parse_seed(text: str, source: str) -> int:
    try:
        seed = int(text)
    except ValueError:
        raise ConfigurationError(f"{source}: seed {text!r} is not an integer") from None
    if not 0 <= seed < 2**64:
        raise ConfigurationError(f"{source}: seed must be in [0, 2**64)")
    return seed


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(doc: dict, assignment: str) -> dict:
    """Apply one ``dotted.key=value`` override; values are parsed as JSON when possible."""
    if "=" not in assignment:
        raise ConfigurationError(f"override {assignment!r} must look like key=value")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    patch: dict = {}
    node = patch
    for part in parts[:-1]:
        node[part] = {}
        node = node[part]
    node[parts[-1]] = _parse_value(raw)
    return deep_merge(doc, patch)


def resolve(config_path: str | None = None, overrides: list[str] | None = None, env: dict | None = None, **flags) -> dict:
    """Build the effective config document following the documented precedence.

    ``flags`` maps dotted keys to values; ``None`` values are ignored.
    """
    doc = load_defaults()
    if config_path:
        doc = deep_merge(doc, read_config_file(config_path))
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        doc["seed"] = parse_seed(env[SEED_ENV], SEED_ENV)
    for assignment in overrides or []:
        doc = apply_override(doc, assignment)
    for key, value in flags.items():
        if value is not None:
            doc = apply_override(doc, f"{key}={json.dumps(value)}")
    RunConfig.from_dict(doc)  # validate early
    return doc


@dataclass
class RunConfig:
    seed: int
    grid: TimeGrid
    priors: PriorSettings
    svi: SviConfig
    mcmc: McmcConfig
    truth: dict
    counts_path: str | None
    settlements_path: str | None
    binning_rule: str
    output_dir: Path
    band: str
    verify: dict
    document: dict

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        seed = parse_seed(str(doc["seed"]), "seed")
        try:
            grid = TimeGrid(**{k: int(v) for k, v in doc["grid"].items()})
            priors = PriorSettings.from_dict(doc["priors"])
            svi = SviConfig(seed=seed, **doc["svi"])
            mcmc = McmcConfig(seed=seed, **doc["mcmc"])
            build_priors(grid, priors)  # surfaces infeasible (mode, std) pairs now
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(f"invalid configuration: {exc}") from exc
        data = doc["data"]
        if data["binning_rule"] not in RULES:
            raise ConfigurationError(f"data.binning_rule must be one of {RULES}")
        if doc["report"]["band"] != "iqr":
            raise ConfigurationError("report.band: only 'iqr' is supported")
        return cls(
            seed=seed,
            grid=grid,
            priors=priors,
            svi=svi,
            mcmc=mcmc,
            truth=doc["truth"],
            counts_path=data["counts"],
            settlements_path=data["settlements"],
            binning_rule=data["binning_rule"],
            output_dir=Path(doc["output_dir"]),
            band=doc["report"]["band"],
            verify=doc["verify"],
            document=doc,
        )

    def synthetic_truth(self) -> SyntheticTruth:
        t = self.truth
        pops = t["populations"]
        if pops == "prior_mode_curve":
            pops = np.atleast_1d(prior_mode_curve(self.grid.midpoints, self.priors.anchor_early, self.priors.anchor_late))
        else:
            pops = np.asarray(pops, dtype=float)
            if pops.shape != (self.grid.n_bins,):
                raise ConfigurationError(f"truth.populations needs {self.grid.n_bins} values")
        params = ModelParams(pops, float(t["loss_rate"]), float(t["scaling_factor"]), float(t["sampling_prob"]), float(t["scaling_exponent"]))
        if not params.in_support():
            raise ConfigurationError("truth parameters are outside the model support")
        return SyntheticTruth(params, self.seed)
