"""Mesh-free solver for the continuous-time heterogeneous-agent economy.

Two networks are trained against the coupled optimal-control and
population-flow PDEs; equilibrium closes through mesh-based capital
aggregation and damped price updates. An independent finite-difference
solver on a grid acts as the verification oracle.
"""

__version__ = "0.1.0"
