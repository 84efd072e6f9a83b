"""Optimal control pulse synthesis for N-qubit gates.

Builds the Pontryagin extremal two-point boundary value problem for
unitary gate generation in the generalized Bloch-vector picture and
solves it by collocation with an epsilon-continuation schedule.
"""

__version__ = "0.1.0"
