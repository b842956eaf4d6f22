"""
run_config.py
Declarative run configuration (TOML or JSON), validated with pydantic.

Every rate and frequency in a file is expressed in units of `frequency_unit`
(e.g. Ω or ε); times and inverse temperatures in units of 1/frequency_unit.
The builders in cli.py apply the scale once, at parse time.

Matrices are lists of rows; an entry is either a real number or an [re, im] pair.
Operators may also be given by preset name (sigma_x, sigma_y, sigma_z, occupation,
identity, and the two-emitter forms sigma_x_a, occupation_b, ...). Observables are
either a list of preset names or a table mapping output names to operators.
"""
from __future__ import annotations

import json
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Annotated, Literal, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from src.couplings import PRESETS
from src.errors import ConfigError

Matrix = list[list[Union[float, list[float]]]]
Operator = Union[str, Matrix]

STATE_PRESETS = {
    "up": np.diag([1.0, 0.0]).astype(complex),
    "down": np.diag([0.0, 1.0]).astype(complex),
    "mixed": 0.5 * np.eye(2, dtype=complex),
}
# product states of the two-emitter register, e.g. "up_down": a excited, b empty
STATE_PRESETS.update({
    f"{a}_{b}": np.kron(STATE_PRESETS[a], STATE_PRESETS[b])
    for a in ("up", "down") for b in ("up", "down")
})


def parse_matrix(value: Operator, presets: dict | None = None) -> np.ndarray:
    presets = PRESETS if presets is None else presets
    if isinstance(value, str):
        if value not in presets:
            raise ConfigError(f"unknown operator preset {value!r} (known: {sorted(presets)})")
        return presets[value].copy()
    rows = []
    for row in value:
        entries = []
        for entry in row:
            if isinstance(entry, list):
                if len(entry) != 2:
                    raise ConfigError(f"complex entries are [re, im] pairs, got {entry}")
                entries.append(complex(entry[0], entry[1]))
            else:
                entries.append(complex(entry))
        rows.append(entries)
    if not rows or any(len(r) != len(rows) for r in rows):
        raise ConfigError("operator matrices must be square and non-empty")
    return np.array(rows, dtype=complex)


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


# ── Bath ──────────────────────────────────────────────────────────────────────

class ExpTermConfig(_Strict):
    coeff: Matrix
    omega: float = 0.0
    gamma: float = Field(0.0, ge=0.0)


class ExponentialSumBath(_Strict):
    type: Literal["exponential_sum"]
    terms: list[ExpTermConfig] = Field(min_length=1)


class DampedModeBath(_Strict):
    type: Literal["damped_mode"]
    g: float
    omega: float
    gamma: float = Field(ge=0.0)
    nbar: float = Field(0.0, ge=0.0)


class OhmicBath(_Strict):
    type: Literal["ohmic"]
    alpha_s: float = Field(ge=0.0)
    omega_c: float = Field(gt=0.0)
    beta: float = Field(gt=0.0)


class TabulatedBath(_Strict):
    type: Literal["tabulated"]
    grid: list[float] = Field(min_length=2)
    values: list[float] = Field(min_length=2)
    beta: float = Field(gt=0.0)


class LatticeBath(_Strict):
    type: Literal["lattice"]
    dim: int = Field(ge=1, le=3)
    j_hop: float = Field(gt=0.0)
    g: float
    emitters: list[list[int]] = Field(min_length=1)


BathConfig = Annotated[
    Union[ExponentialSumBath, DampedModeBath, OhmicBath, TabulatedBath, LatticeBath],
    Field(discriminator="type"),
]


# ── System, numerics, task, output ────────────────────────────────────────────

class HamiltonianTerm(_Strict):
    op: Operator
    coeff: float


class SystemConfig(_Strict):
    couplings: list[Operator] = Field(min_length=1)
    hamiltonian: list[HamiltonianTerm] = Field(default_factory=list)
    rho0: Operator = "up"
    merge_degenerate: bool = True


class NumericsConfig(_Strict):
    dt: float = Field(gt=0.0)
    n_c: int | None = Field(None, ge=1)
    tol_mem: float | None = Field(None, gt=0.0)
    chi_max: int = Field(512, ge=1)
    eps_rel: float = Field(1e-10, ge=0.0, lt=1.0)
    randomized: bool = False
    sketch_oversample: int = Field(8, ge=0)
    sketch_power_iters: int = Field(2, ge=0)
    seed: int = 0
    trotter_corrections: bool = True
    boundary: Literal["product", "stationary"] = "product"

    @model_validator(mode="after")
    def _one_cutoff(self):
        if (self.n_c is None) == (self.tol_mem is None):
            raise ValueError("give exactly one of numerics.n_c or numerics.tol_mem")
        return self


class OracleConfig(_Strict):
    kind: Literal["lindblad", "volterra"]
    dt_fine: float | None = Field(None, gt=0.0)


class TaskConfig(_Strict):
    kind: Literal["propagate", "steady_state", "spectra", "oracle_compare"]
    t_end: float = Field(10.0, gt=0.0)
    observables: Union[list[str], dict[str, Operator]] = Field(default_factory=lambda: ["sigma_z"])
    omega_min: float = -5.0
    omega_max: float = 5.0
    omega_points: int = Field(401, ge=2)
    spectrum_op: Operator = "sigma_z"
    beta: float | None = Field(None, gt=0.0)
    oracle: OracleConfig | None = None

    @model_validator(mode="after")
    def _oracle_for_compare(self):
        if self.kind == "oracle_compare" and self.oracle is None:
            raise ValueError("task.oracle is required for oracle_compare")
        if self.omega_max <= self.omega_min:
            raise ValueError("task.omega_max must exceed task.omega_min")
        return self

    def named_observables(self) -> dict[str, Operator]:
        if isinstance(self.observables, dict):
            return dict(self.observables)
        return {name: name for name in self.observables}


class SweepConfig(_Strict):
    axis: Literal["dt", "chi", "n_c"]
    values: list[float] = Field(min_length=1)


class OutputConfig(_Strict):
    dir: str = "results"
    prefix: str = "run"
    formats: list[Literal["csv", "json"]] = Field(default_factory=lambda: ["csv", "json"])


class RunConfig(_Strict):
    frequency_unit: float = Field(1.0, gt=0.0)
    bath: BathConfig
    system: SystemConfig
    numerics: NumericsConfig
    task: TaskConfig
    output: OutputConfig = Field(default_factory=OutputConfig)
    sweep: SweepConfig | None = None

    def rate(self, value: float) -> float:
        return value * self.frequency_unit

    def time(self, value: float) -> float:
        return value / self.frequency_unit

    def resolved(self) -> dict:
        return self.model_dump(mode="json")

    def with_updates(self, section: str, **changes) -> "RunConfig":
        block = getattr(self, section).model_copy(update=changes)
        return self.model_copy(update={section: block})


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_bytes()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    try:
        if path.suffix == ".json":
            raw = json.loads(text)
        else:
            raw = tomllib.loads(text.decode())
    except (json.JSONDecodeError, tomllib.TOMLDecodeError, UnicodeDecodeError) as e:
        raise ConfigError(f"cannot parse {path}: {e}") from e
    return parse_config(raw)


def parse_config(raw: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"invalid run config:\n{e}") from e
