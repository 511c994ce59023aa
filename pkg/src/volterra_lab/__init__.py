"""volterra-lab - simulation and verification laboratory for stochastic Volterra equations with jumps."""

__version__ = "0.1.0"

__all__ = [
    "kernels",
    "model",
    "levy",
    "inner_sde",
    "scheme",
    "riccati",
    "analysis",
    "config",
    "commands",
    "reporting",
    "observability",
]
