import json
import logging
import os
from dataclasses import asdict, dataclass, fields, is_dataclass, replace
from dataclasses import field as dc_field
from typing import Any, Dict, List, Optional, Union

import config
from errors import ConfigurationError

logger = logging.getLogger(__name__)

MODES = ("det", "sg", "mc", "sc")
EFFECTIVE_CONFIG = "effective_config.json"


@dataclass
class MeshSettings:
    channel_length: float = config.CHANNEL_LENGTH
    channel_halfheight: float = config.CHANNEL_HALFHEIGHT
    obstacle_box: Optional[List[float]] = dc_field(default_factory=lambda: list(config.OBSTACLE_BOX))
    refinement: int = config.REFINEMENT
    inflow_amplitude: float = config.INFLOW_AMPLITUDE
    ramp_rate: float = config.RAMP_RATE


@dataclass
class FieldSettings:
    mean_viscosity: float = config.MEAN_VISCOSITY
    cov: float = config.COV
    correlation_length_x: float = config.CORRELATION_LENGTH_X
    correlation_length_y: float = config.CORRELATION_LENGTH_Y
    m_xi: int = config.STOCHASTIC_DIM
    p_xi: int = config.POLY_DEGREE
    kl_terms_1d: int = config.KL_TERMS_1D


@dataclass
class StepperSettings:
    tolerance: float = config.TOLERANCE
    initial_step: float = config.INITIAL_STEP
    reject_factor: float = config.REJECT_FACTOR
    averaging_period: int = config.AVERAGING_PERIOD
    final_time: float = config.FINAL_TIME
    max_rejections: int = config.MAX_REJECTIONS
    zero_error_growth: float = config.ZERO_ERROR_GROWTH
    max_step: Optional[float] = None


@dataclass
class SolverSection:
    block_solver: str = "exact"
    gmres_tolerance: float = config.GMRES_TOLERANCE
    gmres_max_iter: int = config.GMRES_MAX_ITER
    restart: Optional[int] = None
    chebyshev_iterations: int = config.CHEBYSHEV_ITERATIONS
    smoother_sweeps: int = config.SMOOTHER_SWEEPS


@dataclass
class SamplingSettings:
    n_mc: int = config.N_MONTE_CARLO
    seed: int = config.SEED
    level: Optional[int] = None
    threads: int = config.THREADS
    common_schedule: bool = False
    surrogate_samples: int = config.SURROGATE_SAMPLES


@dataclass
class OutputSettings:
    directory: str = config.OUTPUT_DIR
    vtk: bool = True
    gnuplot: bool = True


@dataclass
class RunConfig:
    """Everything a run needs; sections mirror the JSON document."""
    mode: str = "det"
    mesh: MeshSettings = dc_field(default_factory=MeshSettings)
    field: FieldSettings = dc_field(default_factory=FieldSettings)
    stepper: StepperSettings = dc_field(default_factory=StepperSettings)
    barriers: List[float] = dc_field(default_factory=lambda: list(config.TIME_BARRIERS))
    probes: List[List[float]] = dc_field(default_factory=lambda: [list(p) for p in config.PROBE_POINTS])
    solver: SolverSection = dc_field(default_factory=SolverSection)
    sampling: SamplingSettings = dc_field(default_factory=SamplingSettings)
    output: OutputSettings = dc_field(default_factory=OutputSettings)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @property
    def smolyak_level(self) -> int:
        return self.field.p_xi if self.sampling.level is None else self.sampling.level


def _build(cls, data: Dict[str, Any], path: str):
    if not isinstance(data, dict):
        raise ConfigurationError("expected an object", key=path or None)
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigurationError("unknown key", key=f"{path}.{unknown[0]}" if path else unknown[0])
    defaults = cls()
    values = {}
    for name, value in data.items():
        current = getattr(defaults, name)
        key = f"{path}.{name}" if path else name
        values[name] = _build(type(current), value, key) if is_dataclass(current) else value
    return replace(defaults, **values)


def _check(condition: bool, key: str, message: str):
    if not condition:
        raise ConfigurationError(message, key=key)


def validate(cfg: RunConfig) -> RunConfig:
    """Range checks; raises ConfigurationError naming the offending key."""
    _check(cfg.mode in MODES, "mode", f"must be one of {MODES}")
    m = cfg.mesh
    _check(m.channel_length > 0, "mesh.channel_length", "must be positive")
    _check(m.channel_halfheight > 0, "mesh.channel_halfheight", "must be positive")
    _check(m.obstacle_box is None or len(m.obstacle_box) == 4, "mesh.obstacle_box",
           "must be [x_min, x_max, y_min, y_max] or null")
    _check(isinstance(m.refinement, int) and m.refinement >= 1, "mesh.refinement", "must be a positive integer")
    _check(m.ramp_rate > 0, "mesh.ramp_rate", "must be positive")

    f = cfg.field
    _check(f.mean_viscosity > 0, "field.mean_viscosity", "mean viscosity must be positive")
    _check(f.cov >= 0, "field.cov", f"CoV must be nonnegative, got {f.cov}")
    _check(f.correlation_length_x > 0 and f.correlation_length_y > 0, "field.correlation_length_x",
           "correlation lengths must be positive")
    _check(f.m_xi >= 1, "field.m_xi", "must be at least 1")
    _check(f.p_xi >= 0, "field.p_xi", "must be nonnegative")
    _check(f.kl_terms_1d ** 2 >= f.m_xi, "field.kl_terms_1d", "too few 1D eigenpairs for m_xi modes")

    s = cfg.stepper
    _check(s.tolerance > 0, "stepper.tolerance", "must be positive")
    _check(s.initial_step > 0, "stepper.initial_step", "must be positive")
    _check(0 < s.reject_factor < 1, "stepper.reject_factor", "must lie in (0, 1)")
    _check(s.averaging_period >= 2, "stepper.averaging_period", "must be at least 2")
    _check(s.final_time > 0, "stepper.final_time", "must be positive")

    _check(all(b1 < b2 for b1, b2 in zip(cfg.barriers, cfg.barriers[1:])), "barriers", "must be strictly increasing")
    _check(all(0 <= b <= s.final_time for b in cfg.barriers), "barriers", "must lie within [0, final_time]")

    for i, probe in enumerate(cfg.probes):
        key = f"probes[{i}]"
        _check(len(probe) == 2, key, "must be an [x, y] pair")
        x, y = probe
        _check(0 <= x <= m.channel_length and abs(y) <= m.channel_halfheight, key, "outside the channel")
        if m.obstacle_box is not None:
            x0, x1, y0, y1 = m.obstacle_box
            _check(not (x0 < x < x1 and y0 < y < y1), key, "inside the obstacle")

    _check(cfg.solver.block_solver in ("exact", "iterated"), "solver.block_solver", "must be 'exact' or 'iterated'")
    _check(cfg.solver.gmres_tolerance > 0, "solver.gmres_tolerance", "must be positive")
    _check(cfg.solver.restart is None or cfg.solver.restart >= 1, "solver.restart", "must be positive or null")
    _check(cfg.sampling.n_mc >= 1, "sampling.n_mc", "must be at least 1")
    _check(cfg.sampling.level is None or cfg.sampling.level >= 0, "sampling.level", "must be nonnegative or null")
    _check(cfg.sampling.threads >= 1, "sampling.threads", "must be at least 1")
    return cfg


def parse_config(source: Union[str, os.PathLike, Dict[str, Any], None] = None) -> RunConfig:
    """Load a JSON run configuration (path or parsed dict); missing keys take the defaults."""
    if source is None:
        data = {}
    elif isinstance(source, dict):
        data = source
    else:
        with open(source, "r") as f:
            text = f.read()
        try:
            data = json.loads(text) if text.strip() else {}
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"malformed JSON in {source}: {e}") from e
        logger.info(f"Loaded configuration from {source}")
    cfg = _build(RunConfig, data, "")
    cfg.barriers = [float(b) for b in cfg.barriers]
    cfg.probes = [[float(c) for c in p] for p in cfg.probes]
    return validate(cfg)


def apply_overrides(cfg: RunConfig, mode: Optional[str] = None, out: Optional[str] = None,
                    seed: Optional[int] = None, threads: Optional[int] = None) -> RunConfig:
    """Command-line flags take precedence over the file."""
    if mode is not None:
        cfg.mode = mode
    if out is not None:
        cfg.output.directory = out
    if seed is not None:
        cfg.sampling.seed = seed
    if threads is not None:
        cfg.sampling.threads = threads
    if cfg.sampling.level is None:
        cfg.sampling.level = cfg.field.p_xi
    return validate(cfg)


def save_config(cfg: RunConfig, directory: Optional[str] = None) -> str:
    """Write the effective configuration; parse_config on the file reproduces it."""
    directory = directory or cfg.output.directory
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, EFFECTIVE_CONFIG)
    with open(path, "w") as f:
        json.dump(cfg.to_dict(), f, indent=2)
    logger.info(f"Saved effective configuration to {path}")
    return path
