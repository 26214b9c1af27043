"""Finite-sum nonconvex optimization with gradient/Hessian-focused alternation."""

__version__ = "0.1.0"
