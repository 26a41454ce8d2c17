"""Bosonic simulation and state-learning toolkit.

Phase-space conventions used throughout: hbar = 2, quadrature order
(q1, p1, ..., qm, pm), q = a + a†, p = i(a† - a), vacuum covariance = identity.
"""

__version__ = "0.1.0"
