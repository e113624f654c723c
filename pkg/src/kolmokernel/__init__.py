"""Green kernels of nonautonomous Kolmogorov operators and Lyapunov-based bound checks."""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"

from .operators import CoefficientField, build_example_operator, check_ellipticity  # noqa: E402
from .lyapunov import StaticCertificate, TimeDependentLyapunov  # noqa: E402
from .solver import KernelSlice, SolverConfig, SpaceTimeGrid, solve_kernel_slice  # noqa: E402

__all__ = [
    "__version__",
    "CoefficientField",
    "KernelSlice",
    "SolverConfig",
    "SpaceTimeGrid",
    "StaticCertificate",
    "TimeDependentLyapunov",
    "build_example_operator",
    "check_ellipticity",
    "solve_kernel_slice",
]
