"""unlearn_forge: a desk-scale LLM unlearning laboratory."""
from .divergence import DivergenceKind, f_star, flat_adjustment, g_star, primal_f

__version__ = "0.1.0"

__all__ = ["DivergenceKind", "f_star", "flat_adjustment", "g_star", "primal_f"]
