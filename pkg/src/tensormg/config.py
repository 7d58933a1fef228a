"""JSON experiment configuration with strict validation.

Unknown keys are rejected with their full path so typos fail loudly.
Defaults follow the reference experiment: 5 pre- and postsmoothing steps,
outer tolerance 1e-4, truncation tolerance 1e-7 and 10 exponential-sum
terms.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .discretize import CookieGeometry, ParameterGrid
from .htucker import TruncationPolicy
from .multigrid import CycleConfig, SmootherSpec

SOLVER_KINDS = {
    "mg-jacobi": "modified-jacobi",
    "mg-exact-jacobi": "approx-jacobi",
    "mg-richardson": "richardson",
    "plain-jacobi": "plain-jacobi-solver",
}

_GEOMETRY_KEYS = {"domain", "cookies", "cell_size"}
_GRID_KEYS = {"start", "step", "count"}
_TRUNCATION_KEYS = {"tolerance", "max_rank"}
_TOP_KEYS = {
    "geometry",
    "finest_level",
    "parameter_grid",
    "solver",
    "omega",
    "expsum_k",
    "nu1",
    "nu2",
    "truncation",
    "outer_tolerance",
    "max_iterations",
    "coarse_tolerance",
    "coarse_max_sweeps",
    "output",
}


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key path."""


@dataclass
class ExperimentConfig:
    """Validated inputs for one solver run."""

    geometry: CookieGeometry
    finest_level: int
    pgrid: ParameterGrid
    solver: str = "mg-jacobi"
    cycle: CycleConfig = field(default_factory=CycleConfig)
    smoother: SmootherSpec = field(default_factory=SmootherSpec)
    output: str = "trace.csv"
    raw: dict = field(default_factory=dict)

    def echo_items(self):
        """Flat key/value view of the configuration for CSV provenance."""

        def flatten(prefix, obj):
            if isinstance(obj, dict):
                for key in sorted(obj):
                    yield from flatten(f"{prefix}.{key}" if prefix else key, obj[key])
            else:
                yield prefix, json.dumps(obj)

        return list(flatten("", self.raw))


def _reject_unknown(mapping, allowed, path):
    for key in mapping:
        if key not in allowed:
            raise ConfigError(f"unknown key {path}{key!r}")


def _require(mapping, key, path):
    if key not in mapping:
        raise ConfigError(f"missing key {path}{key!r}")
    return mapping[key]


def _parse_geometry(raw) -> CookieGeometry:
    if not isinstance(raw, dict):
        raise ConfigError("geometry: expected an object")
    _reject_unknown(raw, _GEOMETRY_KEYS, "geometry.")
    domain = _require(raw, "domain", "geometry.")
    cookies = raw.get("cookies", [])
    try:
        return CookieGeometry(
            domain=tuple(tuple(ax) for ax in domain),
            cookies=tuple(tuple(tuple(ax) for ax in box) for box in cookies),
            cell_size=float(raw.get("cell_size", 1.0)),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"geometry: {exc}") from None


def _parse_grid(raw, num_cookies) -> ParameterGrid:
    if isinstance(raw, dict):
        raw = [raw] * num_cookies
    if not isinstance(raw, list) or len(raw) != num_cookies:
        raise ConfigError(
            "parameter_grid: expected one spec or one per cookie "
            f"({num_cookies} cookies)"
        )
    axes = []
    for i, spec in enumerate(raw):
        path = f"parameter_grid[{i}]."
        if not isinstance(spec, dict):
            raise ConfigError(f"parameter_grid[{i}]: expected an object")
        _reject_unknown(spec, _GRID_KEYS, path)
        start = float(spec.get("start", 0.0))
        step = float(_require(spec, "step", path))
        count = int(_require(spec, "count", path))
        if count < 1 or step <= 0:
            raise ConfigError(f"{path}step/count out of range")
        axes.append(start + step * np.arange(count))
    try:
        return ParameterGrid(tuple(axes))
    except ValueError as exc:
        raise ConfigError(f"parameter_grid: {exc}") from None


def parse_config_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("top level: expected an object")
    _reject_unknown(raw, _TOP_KEYS, "")
    geometry = _parse_geometry(_require(raw, "geometry", ""))
    finest_level = int(_require(raw, "finest_level", ""))
    if finest_level < 0:
        raise ConfigError("finest_level: must be >= 0")
    if geometry.num_cookies == 0:
        raise ConfigError("geometry.cookies: need at least one cookie")
    pgrid = _parse_grid(
        raw.get("parameter_grid", {"start": 0.0, "step": 0.01, "count": 101}),
        geometry.num_cookies,
    )
    solver = raw.get("solver", "mg-jacobi")
    if solver not in SOLVER_KINDS:
        raise ConfigError(
            f"solver: unknown kind {solver!r}; choose from {sorted(SOLVER_KINDS)}"
        )
    trunc_raw = raw.get("truncation", {})
    if not isinstance(trunc_raw, dict):
        raise ConfigError("truncation: expected an object")
    _reject_unknown(trunc_raw, _TRUNCATION_KEYS, "truncation.")
    try:
        policy = TruncationPolicy(
            float(trunc_raw.get("tolerance", 1e-7)),
            int(trunc_raw.get("max_rank", 500)),
        )
    except ValueError as exc:
        raise ConfigError(f"truncation: {exc}") from None

    is_plain = solver == "plain-jacobi"
    try:
        cycle = CycleConfig(
            nu1=int(raw.get("nu1", 5)),
            nu2=int(raw.get("nu2", 5)),
            truncation=policy,
            coarse_tol=float(raw.get("coarse_tolerance", 1e-9)),
            coarse_max_sweeps=int(raw.get("coarse_max_sweeps", 500)),
            outer_tol=float(raw.get("outer_tolerance", 1e-4)),
            max_iterations=int(raw.get("max_iterations", 2000 if is_plain else 100)),
        )
        omega = raw.get("omega")
        smoother = SmootherSpec(
            kind=SOLVER_KINDS[solver],
            omega=omega if omega in (None, "auto") else float(omega),
            expsum_k=int(raw.get("expsum_k", 10)),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return ExperimentConfig(
        geometry=geometry,
        finest_level=finest_level,
        pgrid=pgrid,
        solver=solver,
        cycle=cycle,
        smoother=smoother,
        output=str(raw.get("output", "trace.csv")),
        raw=raw,
    )


def parse_config(path) -> ExperimentConfig:
    """Load and validate a JSON experiment configuration file."""
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return parse_config_dict(raw)
