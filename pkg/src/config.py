"""Configuration management for the optimal control solver suite."""

import logging
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, Optional

import yaml

from utils.errors import ConfigurationError

logger = logging.getLogger(__name__)

FORMS = ("primal", "schur", "saddle")
REGULARIZATIONS = ("energy", "l2")
REFINEMENTS = ("uniform", "adaptive")
OUTPUT_FORMATS = ("csv", "json")
PRECONDITIONERS = ("diag", "lumped")
MESH_SIZES = ("jacobian", "diameter")


@dataclass
class MeshConfig:
    """Initial mesh of the hierarchy."""

    dim: int = 3
    cells: int = 16
    big: bool = False


@dataclass
class ProblemConfig:
    """Problem form, regularization and desired state."""

    form: str = "primal"
    regularization: str = "energy"
    rho: str = "adapted"
    rho_value: Optional[float] = None
    mesh_size: str = "jacobian"
    lumped: bool = True
    box_lower: float = 0.25
    box_upper: float = 0.75


@dataclass
class SolverConfig:
    """Krylov solver and kernel settings."""

    rel_tol: float = 1e-6
    max_iters: int = 1000
    preconditioner: str = "diag"
    inner_tol: float = 1e-10
    threads: Optional[int] = None
    strict: bool = True
    seed: int = 0


@dataclass
class StudyConfig:
    """Level hierarchy and nested iteration."""

    levels: int = 3
    refine: str = "uniform"
    nested: bool = False
    alpha: Optional[float] = None
    beta: Optional[float] = None
    theta: float = 0.5


@dataclass
class OutputConfig:
    """Report destination and format."""

    path: Optional[str] = None
    format: str = "csv"
    no_time: bool = False


def parse_rho(text: str):
    """Split a rho flag value ('adapted' or 'constant:<value>') into (mode, value)."""
    if text == "adapted":
        return "adapted", None
    if text.startswith("constant:"):
        try:
            return "constant", float(text.split(":", 1)[1])
        except ValueError:
            raise ConfigurationError(f"Invalid rho value in '{text}'; expected constant:<number>")
    raise ConfigurationError(f"Invalid rho '{text}'; expected 'adapted' or 'constant:<value>'")


class Config:
    """Main configuration manager for solver runs."""

    def __init__(self, config_path: Optional[str] = None):
        """Initialize configuration from file and environment."""
        self.config_path = config_path
        self._from_cli_args = False
        self._raw_config = self._load_yaml(config_path) if config_path else {}
        self._parse_config()
        self._apply_env_overrides()

    @classmethod
    def from_cli_args(cls, config_path: Optional[str] = None, **overrides) -> "Config":
        """Create configuration from parsed command-line flags.

        Flags left at None keep the value from the config file, environment or defaults.
        """
        instance = cls(config_path)
        instance._from_cli_args = True

        sections = {
            "mesh": instance.mesh,
            "problem": instance.problem,
            "solver": instance.solver,
            "study": instance.study,
            "output": instance.output,
        }
        rho = overrides.pop("rho", None)
        if rho is not None:
            instance.problem.rho, instance.problem.rho_value = parse_rho(rho)

        for name, value in overrides.items():
            if value is None:
                continue
            section, _, key = name.partition("__")
            if section not in sections or not hasattr(sections[section], key):
                raise ConfigurationError(f"Unknown configuration option '{name}'")
            setattr(sections[section], key, value)
        return instance

    def _load_yaml(self, config_path: str) -> Dict[str, Any]:
        """Load YAML configuration file."""
        try:
            with open(config_path, "r") as f:
                config = yaml.safe_load(f)
            logger.info(f"Loaded configuration from {config_path}")
            return config or {}
        except FileNotFoundError:
            raise ConfigurationError(
                f"Configuration file not found: {config_path}",
                error_code="CONFIG_NOT_FOUND",
                suggested_action="Check the --config path or copy config/config.yaml.example.",
            )
        except yaml.YAMLError as e:
            raise ConfigurationError(f"Invalid YAML in {config_path}: {e}")

    def _parse_config(self) -> None:
        """Parse raw configuration into typed sections."""
        known = {
            "mesh": MeshConfig,
            "problem": ProblemConfig,
            "solver": SolverConfig,
            "study": StudyConfig,
            "output": OutputConfig,
        }
        for name in self._raw_config:
            if name not in known:
                raise ConfigurationError(f"Unknown configuration section '{name}'")
        for name, section_cls in known.items():
            values = self._raw_config.get(name) or {}
            try:
                setattr(self, name, section_cls(**values))
            except TypeError as e:
                raise ConfigurationError(f"Invalid keys in section '{name}': {e}")

        rho = self.problem.rho
        if isinstance(rho, str) and rho.startswith("constant:"):
            self.problem.rho, self.problem.rho_value = parse_rho(rho)

    def _apply_env_overrides(self) -> None:
        """Apply environment variable overrides.

        Only values still at their defaults are overridden; explicit file and CLI
        values win.
        """
        if env_threads := os.getenv("OCP_THREADS"):
            if self.solver.threads is None:
                self.solver.threads = self._env_int("OCP_THREADS", env_threads)
                logger.info(f"Using thread count from env: {self.solver.threads}")

        if env_strict := os.getenv("OCP_STRICT_DETERMINISM"):
            if "strict" not in (self._raw_config.get("solver") or {}):
                self.solver.strict = env_strict.lower() in ("1", "true", "yes")
                logger.info(f"Using strict determinism from env: {self.solver.strict}")

        if env_format := os.getenv("OCP_OUTPUT_FORMAT"):
            if "format" not in (self._raw_config.get("output") or {}):
                self.output.format = env_format.lower()
                logger.info(f"Using output format from env: {self.output.format}")

        if env_iters := os.getenv("OCP_MAX_ITERS"):
            if "max_iters" not in (self._raw_config.get("solver") or {}):
                self.solver.max_iters = self._env_int("OCP_MAX_ITERS", env_iters)
                logger.info(f"Using max iterations from env: {self.solver.max_iters}")

    @staticmethod
    def _env_int(name: str, value: str) -> int:
        try:
            return int(value)
        except ValueError:
            raise ConfigurationError(f"Environment variable {name} must be an integer, got '{value}'")

    def log_configuration_source(self) -> None:
        """Log the source of configuration values for debugging."""
        logger.info("Configuration precedence: CLI > Config File > Environment > Defaults")
        if self._from_cli_args:
            logger.info("Configuration source: CLI arguments (highest precedence)")
        elif self.config_path:
            logger.info(
                f"Configuration source: Config file ({self.config_path}) + Environment overrides"
            )
        else:
            logger.info("Configuration source: Environment variables + Defaults")

        logger.info(
            f"Final configuration: dim={self.mesh.dim}, cells={self.mesh.cells}, "
            f"levels={self.study.levels}, refine={self.study.refine}, form={self.problem.form}, "
            f"reg={self.problem.regularization}, rho={self.problem.rho}"
        )

    def tolerance_parameters(self) -> Dict[str, float]:
        """alpha/beta of the nested-iteration schedule, defaulting per refinement mode."""
        adaptive = self.study.refine == "adaptive"
        alpha = self.study.alpha if self.study.alpha is not None else (0.25 if adaptive else 0.5)
        beta = self.study.beta if self.study.beta is not None else (0.75 if adaptive else 0.5)
        return {"alpha": alpha, "beta": beta, "base_tol": self.solver.rel_tol}

    def validate(self) -> None:
        """Validate the configuration, collecting every problem before raising."""
        errors = []
        mesh, problem, solver, study, output = (
            self.mesh, self.problem, self.solver, self.study, self.output
        )

        if mesh.dim not in (1, 2, 3):
            errors.append(f"dim must be 1, 2 or 3, got {mesh.dim}")
        if mesh.cells < 1:
            errors.append(f"cells must be >= 1, got {mesh.cells}")
        if problem.form not in FORMS:
            errors.append(f"form must be one of {FORMS}, got '{problem.form}'")
        if problem.regularization not in REGULARIZATIONS:
            errors.append(f"reg must be one of {REGULARIZATIONS}, got '{problem.regularization}'")
        if problem.form == "primal" and problem.regularization == "l2":
            errors.append("form=primal requires reg=energy")
        if problem.rho not in ("adapted", "constant"):
            errors.append(f"rho must be 'adapted' or 'constant:<value>', got '{problem.rho}'")
        if problem.rho == "constant" and (problem.rho_value is None or problem.rho_value <= 0):
            errors.append("rho constant requires a positive value")
        if problem.mesh_size not in MESH_SIZES:
            errors.append(f"mesh_size must be one of {MESH_SIZES}, got '{problem.mesh_size}'")
        if not 0 <= problem.box_lower < problem.box_upper <= 1:
            errors.append("target box must satisfy 0 <= lower < upper <= 1")
        if not 0 < solver.rel_tol < 1:
            errors.append(f"tol must lie in (0, 1), got {solver.rel_tol}")
        if not 0 < solver.inner_tol < 1:
            errors.append(f"inner_tol must lie in (0, 1), got {solver.inner_tol}")
        if solver.max_iters < 1:
            errors.append(f"max_iters must be >= 1, got {solver.max_iters}")
        if solver.preconditioner not in PRECONDITIONERS:
            errors.append(f"preconditioner must be one of {PRECONDITIONERS}")
        if solver.threads is not None and solver.threads < 1:
            errors.append(f"threads must be >= 1, got {solver.threads}")
        if study.levels < 1:
            errors.append(f"levels must be >= 1, got {study.levels}")
        if study.refine not in REFINEMENTS:
            errors.append(f"refine must be one of {REFINEMENTS}, got '{study.refine}'")
        if study.refine == "uniform" and mesh.dim == 3 and study.levels >= 4 and not mesh.big:
            errors.append("uniform 3D studies with levels >= 4 need --big")
        if not 0 < study.theta <= 1:
            errors.append(f"theta must lie in (0, 1], got {study.theta}")
        if study.alpha is not None and not 0 < study.alpha <= 1:
            errors.append(f"alpha must lie in (0, 1], got {study.alpha}")
        if study.beta is not None and study.beta <= 0:
            errors.append(f"beta must be positive, got {study.beta}")
        if output.format not in OUTPUT_FORMATS:
            errors.append(f"format must be one of {OUTPUT_FORMATS}, got '{output.format}'")

        if errors:
            raise ConfigurationError(
                f"Configuration errors: {'; '.join(errors)}",
                suggested_action="Run with --help for valid flag values.",
                context={"errors": errors},
            )

    def to_dict(self) -> Dict[str, Any]:
        """Configuration echo for JSON reports."""
        return {
            "mesh": asdict(self.mesh),
            "problem": asdict(self.problem),
            "solver": asdict(self.solver),
            "study": {**asdict(self.study), **self.tolerance_parameters()},
            "output": asdict(self.output),
        }


def find_config_file() -> Optional[str]:
    """Find a configuration file in the standard locations."""
    script_dir = Path(__file__).parent.parent
    for path in (script_dir / "config" / "config.yaml", Path("config/config.yaml")):
        if path.exists():
            return str(path)
    return None


# Singleton instance
_config: Optional[Config] = None


def get_config(config_path: Optional[str] = None) -> Config:
    """Get or create configuration instance."""
    global _config
    if _config is None:
        _config = Config(config_path or find_config_file())
        _config.validate()
    return _config


def reload_config(config_path: Optional[str] = None) -> Config:
    """Force reload configuration from file."""
    global _config
    _config = Config(config_path or find_config_file())
    _config.validate()
    return _config
