import hashlib
import math
import os
import numpy as np
import orjson
import yaml

from dataclasses import replace
from dotenv import load_dotenv
from functools import lru_cache
from pathlib import Path
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from typing import Dict, List, Literal, Optional, Union

from core.errors import ConfigurationError
from core.market_model import (
    CoefficientField, MarketModel, UnivariatePayoff, constant_field, hinge, hinge_of_price, power, power_of_price,
    quadratic, quartic, sine_modulated_field, table,
)
from core.pde_core import SpaceTimeGrid

COMMANDS = ("price-passport", "price-symmetric", "verify", "transform", "simulate")
SUITES = ("comparison", "convexity", "hormander", "adjoint-identity", "greens")
DEFAULT_OUT_DIR = "runs"
CN_STEPS_PER_YEAR = 200

# Sections each command cannot run without.
REQUIRED_SECTIONS = {
    "price-passport": ("market", "passport"),
    "price-symmetric": ("symmetric", "mc"),
    "verify": ("verify",),
    "transform": ("transform",),
    "simulate": ("mc",),
}
SUITE_SECTIONS = {
    "comparison": ("grid", "payoff"),
    "convexity": ("payoff",),
    "hormander": (),
    "adjoint-identity": ("grid",),
    "greens": ("grid",),
}


class Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class MarketSection(Section):
    sigma: List[float] = Field(..., min_length=1, json_schema_extra={"example": [0.2, 0.3]},
                               description="Per-asset volatilities.")
    rho: Optional[List[List[float]]] = Field(None, description="Correlation matrix; identity when omitted.")
    spot: Optional[List[float]] = Field(None, description="Initial prices; all ones when omitted.")

    @property
    def n(self) -> int:
        return len(self.sigma)

    def to_model(self) -> MarketModel:
        rho = self.rho if self.rho is not None else np.eye(self.n).tolist()
        spot = self.spot if self.spot is not None else [1.0] * self.n
        return MarketModel(sigma=self.sigma, rho=rho, spot=spot)


class PayoffSection(Section):
    kind: Literal["hinge", "power", "quadratic", "quartic", "table"] = "hinge"
    strike: float = 0.0
    power: float = 2.0
    axis: int = Field(0, ge=0)
    knots: Optional[List[float]] = None
    values: Optional[List[float]] = None
    coordinates: Literal["normal", "lognormal"] = "normal"

    @model_validator(mode="after")
    def _check_kind(self):
        if self.kind == "table" and (self.knots is None or self.values is None):
            raise ValueError("A table payoff needs knots and values.")
        if self.coordinates == "lognormal" and self.kind not in ("hinge", "power"):
            raise ValueError("Price-coordinate payoffs are limited to hinge and power.")
        return self

    def build(self) -> UnivariatePayoff:
        if self.coordinates == "lognormal":
            if self.kind == "power":
                return power_of_price(self.power, self.axis)
            return hinge_of_price(self.strike, self.axis)
        if self.kind == "hinge":
            return hinge(self.strike, self.axis)
        if self.kind == "power":
            return power(self.power, self.axis)
        if self.kind == "quadratic":
            return quadratic(self.axis)
        if self.kind == "quartic":
            return quartic(self.axis)
        return table(self.knots, self.values, self.axis)


class GridSection(Section):
    lower: List[float] = Field(..., min_length=1)
    upper: List[float] = Field(..., min_length=1)
    nodes: List[int] = Field(..., min_length=1)
    horizon: float = Field(1.0, gt=0)
    steps: Optional[int] = Field(None, ge=1, description="Time steps; the stability bound when omitted.")
    stored_layers: Optional[int] = Field(11, ge=2)
    scheme: Literal["explicit", "crank-nicolson"] = "explicit"
    cross: Literal["centered", "monotone"] = "centered"

    @model_validator(mode="after")
    def _check_dimensions(self):
        if not len(self.lower) == len(self.upper) == len(self.nodes):
            raise ValueError("grid.lower, grid.upper and grid.nodes must have the same length.")
        return self

    def to_grid(self, max_norm: float = 0.0) -> SpaceTimeGrid:
        """The configured grid; explicit runs without a step count get the stable one."""
        grid = SpaceTimeGrid(tuple(self.lower), tuple(self.upper), tuple(self.nodes), self.horizon,
                             steps=self.steps or 1, stored_layers=self.stored_layers)
        if self.steps is not None:
            return grid
        if self.scheme == "crank-nicolson":
            return replace(grid, steps=max(1, math.ceil(CN_STEPS_PER_YEAR * self.horizon)))
        return grid.with_stable_steps(max_norm)


class MCSection(Section):
    paths: int = Field(100_000, ge=1)
    steps: Optional[int] = Field(None, ge=1)
    scheme: Literal["euler", "log-euler"] = "log-euler"
    antithetic: bool = False
    block_size: int = Field(4096, ge=2, description="Paths per worker task; results do not depend on it.")
    threads: int = Field(1, ge=1)
    progress: bool = False
    checkpoints: int = Field(2, ge=2)
    process: Literal["gbm", "index-state", "relative-price", "account", "portfolio"] = "account"
    strategy: str = Field("stop-loss", description="Named strategy for account and portfolio runs.")
    horizon: float = Field(1.0, gt=0)
    write_paths: bool = False


class SymmetricSection(Section):
    sigma: float = Field(0.2, ge=0)
    strike: float = 1.0
    horizon: float = Field(1.0, gt=0)
    m0: float = Field(1.0, ge=0, lt=2)
    x0: float = Field(1.0, gt=0)
    nodes_per_ln2: int = Field(16, ge=2)
    z1_min: float = Field(-3.0, lt=0)
    z2_min: float = -2.5
    z2_max: float = 2.5
    z2_nodes: int = Field(101, ge=3)
    eps: float = Field(0.0, ge=0)
    stop_loss_eps: List[float] = Field(default_factory=list,
                                       description="Bridge widths of the smoothed stop-loss values to report.")


class PassportSection(Section):
    strike: float = 0.0
    horizon: float = Field(1.0, gt=0)
    p0: float = 0.0
    p_nodes: int = Field(61, ge=3)
    x_nodes: int = Field(21, ge=3)
    candidates: Literal["rotated", "extended"] = "extended"
    dyadic_level: Optional[int] = Field(None, ge=0, le=3,
                                        description="Also price every dyadic strategy of this level (n = 1).")


class FieldSection(Section):
    """A constant matrix, optionally with amplitude * sin(x[axis]) added to entry (row, row)."""
    matrix: List[List[float]]
    amplitude: float = 0.0
    axis: int = Field(0, ge=0)
    row: int = Field(0, ge=0)

    def build(self) -> CoefficientField:
        if self.amplitude == 0.0:
            return constant_field(self.matrix)
        return sine_modulated_field(self.matrix, self.amplitude, self.axis, self.row)


class VerifySection(Section):
    suite: str = Field(..., json_schema_extra={"example": "comparison"})
    field: Optional[FieldSection] = None
    upper_field: Optional[FieldSection] = None
    t_eval: Optional[float] = Field(None, gt=0)
    criteria: List[Literal["global", "critical-set", "local-preservation", "search", "solved"]] = \
        Field(default_factory=lambda: ["global", "critical-set"])
    expect: Dict[str, Literal["witness", "pass"]] = Field(
        default_factory=dict, description="Expected outcome per criterion; unlisted criteria must pass.")
    eps: float = Field(0.0, ge=0)
    box: float = Field(3.0, gt=0)
    nodes: int = Field(31, ge=5)
    budget: int = Field(200, ge=1)
    family: Literal["hinge", "univariate"] = "hinge"
    vector_fields: Literal["coordinate", "grushin", "single", "depth-two"] = "grushin"
    point: List[float] = Field(default_factory=lambda: [0.0, 0.0])
    max_depth: int = Field(3, ge=0)
    alphas: List[List[int]] = Field(default_factory=lambda: [[0]])
    forward_point: List[float] = Field(default_factory=lambda: [0.5, 0.0])
    adjoint_point: List[float] = Field(default_factory=lambda: [0.0, 0.0])
    window_lower: Optional[List[float]] = None
    window_upper: Optional[List[float]] = None
    window_times: List[float] = Field(default_factory=lambda: [0.2, 0.8])
    refine: bool = Field(False, description="Repeat the Green's identity check with h and k halved.")
    tolerance: Optional[float] = Field(None, gt=0)

    @model_validator(mode="after")
    def _check_expectations(self):
        unknown = sorted(set(self.expect) - set(self.criteria))
        if unknown:
            raise ValueError(f"verify.expect names criteria that are not run: {', '.join(unknown)}.")
        return self


class TransformSection(Section):
    direction: Literal["to-lognormal", "to-normal"]
    target: Literal["payoff", "surface"] = "payoff"
    input: Optional[str] = Field(None, description="Path of a binary surface for target=surface.")
    lower: float = -3.0
    upper: float = 3.0
    nodes: int = Field(61, ge=2)


class OutputSection(Section):
    directory: Optional[str] = Field(None, description="Defaults to PASSPORT_LAB_OUT, then 'runs'.")
    surface_csv: bool = True
    binary: bool = True


class RunConfig(Section):
    command: Literal["price-passport", "price-symmetric", "verify", "transform", "simulate"]
    seed: int = Field(0, ge=0)
    market: Optional[MarketSection] = None
    payoff: Optional[PayoffSection] = None
    grid: Optional[GridSection] = None
    mc: Optional[MCSection] = None
    symmetric: Optional[SymmetricSection] = None
    passport: Optional[PassportSection] = None
    verify: Optional[VerifySection] = None
    transform: Optional[TransformSection] = None
    output: OutputSection = Field(default_factory=OutputSection)

    @model_validator(mode="after")
    def _check_sections(self):
        required = list(REQUIRED_SECTIONS[self.command])
        if self.command == "verify" and self.verify is not None and self.verify.suite in SUITE_SECTIONS:
            required.extend(SUITE_SECTIONS[self.verify.suite])
        if self.command == "simulate" and self.mc is not None and self.mc.process in ("gbm", "portfolio"):
            required.append("market")
        if self.command == "transform" and self.transform is not None and self.transform.target == "payoff":
            required.append("payoff")
        missing = [name for name in required if getattr(self, name) is None]
        if missing:
            raise ValueError(f"Command '{self.command}' needs the section(s): {', '.join(missing)}.")
        return self


def parse_config(data: Union[str, dict]) -> RunConfig:
    """
    Builds a RunConfig from YAML text or an already-parsed mapping.

    Raises:
        ConfigurationError: for malformed YAML or a config that fails validation.
    """
    if isinstance(data, str):
        try:
            data = yaml.safe_load(data)
        except yaml.YAMLError as e:
            raise ConfigurationError(f"Could not parse the configuration: {e}") from e
    if not isinstance(data, dict):
        raise ConfigurationError("A configuration must be a mapping of sections.")
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigurationError(f"Invalid configuration:\n{e}") from e


def load_config(path: Union[str, Path]) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"Configuration file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"))


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=False)


# Fields that change how a run executes but not what it computes.
RUNTIME_FIELDS = {"mc": {"threads", "progress"}, "output": {"directory"}}


def config_hash(cfg: RunConfig) -> str:
    """
    First 16 hex digits of the sha256 of the canonical (key-sorted) JSON form,
    without the runtime-only fields.
    """
    payload = orjson.dumps(cfg.model_dump(mode="json", exclude=RUNTIME_FIELDS), option=orjson.OPT_SORT_KEYS)
    return hashlib.sha256(payload).hexdigest()[:16]


def with_overrides(cfg: RunConfig, seed: Optional[int] = None, threads: Optional[int] = None,
                   out: Optional[str] = None) -> RunConfig:
    """Applies command-line overrides. Only --seed changes the config hash."""
    update = {}
    if seed is not None:
        update["seed"] = seed
    if threads is not None and cfg.mc is not None:
        update["mc"] = cfg.mc.model_copy(update={"threads": threads})
    if out is not None:
        update["output"] = cfg.output.model_copy(update={"directory": out})
    return cfg.model_copy(update=update) if update else cfg


class Settings(BaseModel):
    out_dir: str = DEFAULT_OUT_DIR


# Read once per process; tests clear the cache to pick up a patched environment.
@lru_cache
def get_settings() -> Settings:
    load_dotenv()
    return Settings(out_dir=os.getenv("PASSPORT_LAB_OUT", DEFAULT_OUT_DIR))


def output_directory(cfg: RunConfig) -> Path:
    return Path(cfg.output.directory or get_settings().out_dir)
