"""
Run configuration: a sectioned ``key = value`` file read with
:mod:`configparser`.

Unknown sections and keys are rejected, and every error names the line it
refers to.  See ``docs/config.md`` for the grammar and all keys.
"""
from __future__ import annotations

import configparser
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

from .core import CovStructure, EstimatorKind, EstimatorSpec, Family, ModelSpec
from .errors import ConfigError
from .experiments import DEFAULT_EPSILONS, Contamination, FitSettings, SimConfig
from .optimize import OptimizerOptions

REQUIRED = object()


def _floats(text: str) -> tuple:
    return tuple(float(t) for t in text.replace(",", " ").split())


def _ints(text: str) -> tuple:
    return tuple(int(t) for t in text.replace(",", " ").split())


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _choice(*options) -> Callable[[str], str]:
    def parse(text: str) -> str:
        val = text.strip().lower()
        if val not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {text!r}")
        return val
    return parse


def _estimator(token: str) -> EstimatorSpec:
    """``mle`` or ``mdpde:<alpha>``."""
    token = token.strip().lower()
    if token == "mle":
        return EstimatorSpec.mle()
    kind, _, alpha = token.partition(":")
    if kind != "mdpde" or not alpha:
        raise ValueError(f"estimator must be 'mle' or 'mdpde:<alpha>', got {token!r}")
    return EstimatorSpec.mdpde(float(alpha))


def _estimators(text: str) -> tuple:
    return tuple(_estimator(t) for t in text.split(",") if t.strip())


def _conditions(text: str) -> tuple:
    names = tuple(t.strip().upper() for t in text.replace(",", " ").split())
    bad = [n for n in names if n not in ("A3", "B1", "B3", "B4", "B5")]
    if bad:
        raise ValueError(f"unknown condition(s) {', '.join(bad)}")
    return names


SCHEMA: dict = {
    "model": {
        "family": (_choice("gaussian", "bernoulli"), REQUIRED),
        "cov_structure": (_choice("diagonal", "full"), "diagonal"),
        "m": (int, None),
        "p": (int, None),
        "q": (int, None),
    },
    "simulation": {
        "beta0": (_floats, None),
        "sigma0_sq": (float, 0.0),
        "sigma_u_sq": (float, None),
        "n": (int, None),
        "replication": (int, 0),
        "seed": (int, 20240101),
        "contamination_fraction": (float, 0.0),
        "contamination_shift": (float, 10.0),
        "contamination_target": (_choice("response", "leverage"), "response"),
    },
    "estimator": {
        "kind": (_choice("mle", "mdpde"), "mle"),
        "alpha": (float, None),
    },
    "experiment": {
        "estimators": (_estimators, (EstimatorSpec.mle(),)),
        "n_grid": (_ints, None),
        "replications": (int, None),
        "epsilons": (_floats, DEFAULT_EPSILONS),
        "tail_epsilon": (float, None),
        "record_timing": (_bool, False),
    },
    "optimizer": {
        "gtol": (float, 1e-6),
        "step_tol": (float, 1e-10),
        "max_iter": (int, 500),
        "n_starts": (int, 1),
    },
    "quadrature": {
        "gh_order": (int, 20),
    },
    "diagnostics": {
        "conditions": (_conditions, ("B1",)),
        "point": (_choice("truth", "mle"), "mle"),
        "alpha": (float, 0.5),
        "alpha_grid": (_floats, None),
        "mc_draws": (int, 10_000),
        "seed": (int, 0),
        "groups": (int, None),
    },
    "output": {
        "curves": (str, "curves.csv"),
        "plot_data": (str, "plot_data.csv"),
        "summary": (str, "summary.txt"),
    },
}


def _line_index(text: str) -> dict:
    """Map ``(section, key)`` and ``(section, None)`` to 1-based line numbers."""
    where = {}
    section = None
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        head = re.fullmatch(r"\[([^\]]+)\]", line)
        if head:
            section = head.group(1).strip().lower()
            where.setdefault((section, None), no)
        elif section is not None and raw[:1] not in " \t":
            key = re.split(r"[=:]", line, maxsplit=1)[0].strip().lower()
            where.setdefault((section, key), no)
    return where


@dataclass(frozen=True)
class RunConfig:
    """Parsed configuration; ``values[section][key]`` holds converted values
    (``None`` where an optional key was omitted)."""

    values: dict
    source: str = "<string>"
    lines: Optional[dict] = None

    def get(self, section: str, key: str):
        return self.values[section][key]

    def require(self, section: str, *keys: str) -> None:
        for key in keys:
            if self.values[section][key] is None:
                raise ConfigError(f"{self.source}: missing required key '{key}' in [{section}]")

    # -- builders --------------------------------------------------------
    @property
    def family(self) -> Family:
        return Family(self.get("model", "family"))

    @property
    def structure(self) -> CovStructure:
        return CovStructure(self.get("model", "cov_structure"))

    def model_spec(self) -> ModelSpec:
        self.require("model", "m", "p", "q")
        v = self.values["model"]
        return ModelSpec(self.family, self.structure, v["m"], v["p"], v["q"])

    def sim_config(self, n_grid=None, replications: int = 1) -> SimConfig:
        self.require("simulation", "beta0", "sigma_u_sq")
        s = self.values["simulation"]
        if n_grid is None:
            self.require("simulation", "n")
            n_grid = (s["n"],)
        contamination = None
        if s["contamination_fraction"] > 0:
            contamination = Contamination(s["contamination_fraction"],
                                          s["contamination_shift"],
                                          s["contamination_target"])
        try:
            return SimConfig(self.model_spec(), s["beta0"], s["sigma_u_sq"], s["sigma0_sq"],
                             tuple(n_grid), replications, s["seed"], contamination)
        except ValueError as err:
            raise ConfigError(f"{self.source}: {err}") from None

    def experiment_config(self) -> SimConfig:
        self.require("experiment", "n_grid", "replications")
        e = self.values["experiment"]
        return self.sim_config(e["n_grid"], e["replications"])

    def estimator(self) -> EstimatorSpec:
        e = self.values["estimator"]
        if e["kind"] == EstimatorKind.MLE.value:
            return EstimatorSpec.mle()
        self.require("estimator", "alpha")
        return EstimatorSpec.mdpde(e["alpha"])

    def optimizer_options(self) -> OptimizerOptions:
        o = self.values["optimizer"]
        return OptimizerOptions(gtol=o["gtol"], step_tol=o["step_tol"],
                                max_iter=o["max_iter"], n_starts=o["n_starts"])

    def fit_settings(self) -> FitSettings:
        return FitSettings(self.optimizer_options(), self.get("quadrature", "gh_order"),
                           self.structure)


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    """Parse configuration text.

    Raises
    ------
    ConfigError
        On syntax errors, unknown sections or keys, unconvertible values and
        missing required keys, with the offending line number.
    """
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str.lower
    try:
        parser.read_string(text, source=source)
    except configparser.MissingSectionHeaderError as err:
        raise ConfigError(f"{source}:{err.lineno}: key outside any section") from None
    except configparser.ParsingError as err:
        no = err.errors[0][0] if err.errors else "?"
        raise ConfigError(f"{source}:{no}: cannot parse line") from None
    except (configparser.DuplicateOptionError, configparser.DuplicateSectionError) as err:
        raise ConfigError(f"{source}:{err.lineno}: {err.message.splitlines()[0]}") from None
    lines = _line_index(text)
    values = {}
    for section in parser.sections():
        if section.lower() not in SCHEMA:
            no = lines.get((section.lower(), None), "?")
            raise ConfigError(f"{source}:{no}: unknown section [{section}]")
    for section, keys in SCHEMA.items():
        present = parser[section] if parser.has_section(section) else {}
        for key in present:
            if key not in keys:
                raise ConfigError(f"{source}:{lines.get((section, key), '?')}: "
                                  f"unknown key '{key}' in [{section}]")
        out = {}
        for key, (convert, default) in keys.items():
            if key in present:
                try:
                    out[key] = convert(present[key])
                except ValueError as err:
                    raise ConfigError(f"{source}:{lines.get((section, key), '?')}: "
                                      f"bad value for '{key}': {err}") from None
            elif default is REQUIRED:
                raise ConfigError(f"{source}: missing required key '{key}' in [{section}]")
            else:
                out[key] = default
        values[section] = out
    return RunConfig(values, source, lines)


def load_config(path) -> RunConfig:
    path = Path(path)
    return parse_config(path.read_text(), str(path))
