"""Deterministic simulator of N-node PowerSGD and PowerSGD+ with error feedback."""
from .cluster import CommAccountant, Schedule, all_reduce_mean, expected_comm_per_iteration, expected_comm_total
from .compressors import CompressorKind, compress, contractive_check, ssp_compress, svd_compress
from .config import RunConfig, load_config
from .errors import ConfigError, DivergenceError, NumericalError, PreconditionError
from .numkernel import qr_economic, thin_svd
from .problems import CounterexampleProblem, QuadraticProblem, epsilon_zero, quadratic_problem
from .trainer import Hyper, run, simulate, theoretical_rate_bound, theoretical_step_size

__version__ = "0.1.0"

__all__ = [
    "CommAccountant", "Schedule", "all_reduce_mean", "expected_comm_per_iteration",
    "expected_comm_total", "CompressorKind", "compress", "contractive_check", "ssp_compress",
    "svd_compress", "RunConfig", "load_config", "ConfigError", "DivergenceError",
    "NumericalError", "PreconditionError", "qr_economic", "thin_svd", "CounterexampleProblem",
    "QuadraticProblem", "epsilon_zero", "quadratic_problem", "Hyper", "run", "simulate",
    "theoretical_rate_bound", "theoretical_step_size",
]
