"""Experiment configuration: schema validation and model construction."""

from pathlib import Path
from typing import Annotated, List, Literal, Optional, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, PositiveFloat, PositiveInt, model_validator

from .ou_analytic import OuModel
from .sde_core import (PolyDriftSpec, PolyPotential, TrigPoly, _horner, build_duffing,
                       build_gradient_model, build_langevin_model, build_poly_drift_model,
                       coef_value)

EXPERIMENTS = ("simulate", "estimate-pm", "convergence", "verify-drift", "doeblin",
               "fokker-planck", "ou-analytic")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class TrigPolyCfg(_Strict):
    """Periodic coefficient. ``standard``: a0/2 + sum a_n cos(2 pi n t/T) + b_n sin(...);
    ``shifted`` uses phase 2 pi n t/T - n pi."""

    a0: float = 0.0
    cos: List[float] = []
    sin: List[float] = []
    convention: Literal["standard", "shifted"] = "standard"

    def build(self, period):
        if self.convention == "standard":
            return TrigPoly.from_standard(period, self.a0, self.cos, self.sin)
        return TrigPoly(period, self.a0, self.cos, self.sin)


Coef = Union[float, TrigPolyCfg]


def _coef(c, period):
    return c.build(period) if isinstance(c, TrigPolyCfg) else float(c)


def _rows(rows, period):
    return tuple(tuple(_coef(c, period) for c in row) for row in rows)


Matrix = Union[float, List[float], List[List[float]]]


class OuCfg(_Strict):
    kind: Literal["ou"]
    eigvals: List[PositiveFloat]
    eigvecs: Optional[List[List[float]]] = None
    sigma: Matrix
    forcing: List[TrigPolyCfg]
    period: PositiveFloat

    def build(self):
        d = len(self.eigvals)
        M = np.eye(d) if self.eigvecs is None else np.array(self.eigvecs, float)
        return OuModel(M, np.array(self.eigvals), self.sigma,
                       tuple(f.build(self.period) for f in self.forcing), self.period)


class DuffingCfg(_Strict):
    kind: Literal["duffing"]
    A: float
    omega: float
    sigma: float

    def build(self):
        return build_duffing(self.A, self.omega, self.sigma)


class PolynomialCfg(_Strict):
    kind: Literal["polynomial"]
    period: PositiveFloat
    coeffs: List[List[Coef]]
    sigma: Matrix

    def build(self):
        spec = PolyDriftSpec(self.period, _rows(self.coeffs, self.period))
        return build_poly_drift_model(spec, self.sigma)


class GradientCfg(_Strict):
    kind: Literal["gradient"]
    period: PositiveFloat
    potential: List[List[Coef]]  # V = sum_i sum_k c_ik(t) x_i^k
    sigma: Matrix

    def build(self):
        pot = PolyPotential(_rows(self.potential, self.period), self.period)
        return build_gradient_model(pot, self.sigma, period=self.period)


class LangevinCfg(_Strict):
    kind: Literal["langevin"]
    period: PositiveFloat
    force: List[List[Coef]]  # F_i(t, q) = sum_k c_ik(t) q_i^k
    gamma: float = Field(ge=0)
    sigma: Matrix

    def build(self):
        rows = _rows(self.force, self.period)

        def force(t, q):
            out = np.empty_like(q)
            for i, row in enumerate(rows):
                out[..., i] = _horner([coef_value(c, t) for c in row], q[..., i])
            return out

        return build_langevin_model(force, self.gamma, self.sigma, self.period, dim=len(rows))


ModelCfg = Annotated[Union[OuCfg, DuffingCfg, PolynomialCfg, GradientCfg, LangevinCfg],
                     Field(discriminator="kind")]

Vec = Union[float, List[float]]


class SimulateParams(_Strict):
    s: float = 0.0
    x0: Vec = 0.0
    n_periods: PositiveInt
    record_every: PositiveInt = 1
    dt: PositiveFloat
    n_paths: PositiveInt
    format: Literal["csv", "binary"] = "csv"


class EstimatePmParams(_Strict):
    phases: List[float] = Field(min_length=2)
    burn_in: PositiveInt
    n_paths: PositiveInt
    dt: PositiveFloat
    x0: Optional[Vec] = None
    bins: Optional[PositiveInt] = None


class EmpiricalTarget(_Strict):
    burn_in: PositiveInt
    n_paths: PositiveInt


class ConvergenceParams(_Strict):
    s: float = 0.0
    x0: Vec
    ns: List[PositiveInt] = Field(min_length=1)
    dt: PositiveFloat
    n_paths: PositiveInt
    bins: Optional[PositiveInt] = None
    target: Union[Literal["analytic"], EmpiricalTarget] = "analytic"

    @model_validator(mode="after")
    def _increasing(self):
        if any(b <= a for a, b in zip(self.ns, self.ns[1:])):
            raise ValueError("ns must be strictly increasing")
        return self


class VerifyDriftParams(_Strict):
    mode: Literal["weak-dissipativity", "geometric", "classify"]
    c: Optional[float] = Field(default=None, ge=0)
    C: Optional[float] = None
    lam: Optional[PositiveFloat] = Field(default=None, alias="lambda")
    V: Union[Literal["squared-norm"], List[List[Coef]]] = "squared-norm"
    radius: PositiveFloat = 10.0
    grid_density: PositiveInt = 201

    @model_validator(mode="after")
    def _constants(self):
        if self.mode == "weak-dissipativity" and (self.c is None or self.lam is None):
            raise ValueError("weak-dissipativity needs c and lambda")
        if self.mode == "geometric" and (self.C is None or self.lam is None):
            raise ValueError("geometric needs C and lambda")
        return self


class DoeblinParams(_Strict):
    s: float = 0.0
    lower: Vec
    upper: Vec
    start_points: List[Vec] = Field(min_length=1)
    dt: PositiveFloat
    n_paths: PositiveInt
    bins: PositiveInt = 100
    bandwidth: Union[Literal["silverman"], PositiveFloat] = "silverman"


class FokkerPlanckParams(_Strict):
    x_lo: float
    x_hi: float
    nx: int = Field(ge=16)
    nt: int = Field(ge=16)
    tol: PositiveFloat = 1e-8
    max_iters: PositiveInt = 500
    phases: List[float] = [0.0]


class OuAnalyticParams(_Strict):
    n_times: PositiveInt = 64
    phases: List[float] = [0.0]


PARAMS = {
    "simulate": SimulateParams, "estimate-pm": EstimatePmParams,
    "convergence": ConvergenceParams, "verify-drift": VerifyDriftParams,
    "doeblin": DoeblinParams, "fokker-planck": FokkerPlanckParams,
    "ou-analytic": OuAnalyticParams,
}


class ExperimentConfig(_Strict):
    experiment: Optional[Literal[EXPERIMENTS]] = None
    seed: Optional[int] = Field(default=None, ge=0, lt=2**64)
    model: ModelCfg
    params: dict = {}
    output_dir: Optional[str] = None


class ConfigError(ValueError):
    pass


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)  # JSON is a subset of YAML
    except yaml.YAMLError as exc:
        raise ConfigError(f"config: parse error in {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config: top level must be a mapping")
    return data


def validate(data, experiment, seed=None):
    """Return (ExperimentConfig, params model); raises ConfigError on any problem."""
    try:
        cfg = ExperimentConfig.model_validate(data)
    except Exception as exc:
        raise ConfigError(f"config: {exc}") from exc
    if cfg.experiment is not None and cfg.experiment != experiment:
        raise ConfigError(f"config: experiment {cfg.experiment!r} does not match "
                          f"subcommand {experiment!r}")
    if seed is not None:
        cfg.seed = seed
    if cfg.seed is None:
        raise ConfigError("config: seed is required (set it in the config or pass --seed)")
    try:
        params = PARAMS[experiment].model_validate(cfg.params)
    except Exception as exc:
        raise ConfigError(f"config: params: {exc}") from exc
    return cfg, params


def build_model(cfg: ExperimentConfig):
    """(SdeModel, OuModel or None)."""
    try:
        built = cfg.model.build()
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"config: model: {exc}") from exc
    if isinstance(built, OuModel):
        return built.to_sde_model(), built
    return built, None


def build_test_function(V, model):
    if V == "squared-norm":
        return PolyPotential.squared_norm(model.dim, model.period)
    return PolyPotential(_rows(V, model.period), model.period)
