"""Collocation batches and fixed quadrature meshes.

Training points are drawn from a lattice (default 11 nodes per input, with
replacement), matching the benchmark sampling scheme; continuous uniform
sampling is available behind a flag as a robustness option. Boundary batches
pin one coordinate exactly on its face and draw the rest; the initial-time
batch lives at t = 0.

The quadrature mesh is a uniform tensor-product grid with trapezoid weights
(half weight on edges, quarter on corners), used for mass and aggregate
capital integrals. Trapezoid is exact for bilinear integrands on the mesh.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError


@dataclass
class CollocationBatch:
    """One training batch: interior points, four pinned boundary faces, and
    initial-time points. Each entry is a tuple of flat float64 arrays."""

    interior: tuple          # (a, z, t)
    boundary_a_min: tuple    # (a, z, t) with a == a_min
    boundary_a_max: tuple    # (a, z, t) with a == a_max
    boundary_z_min: tuple    # (a, z, t) with z == z_min
    boundary_z_max: tuple    # (a, z, t) with z == z_max
    initial_time: tuple      # (a, z) at t = 0


@dataclass
class QuadratureMesh:
    """Tensor-product trapezoid rule over the (a, z) box."""

    a_nodes: np.ndarray
    z_nodes: np.ndarray
    weights: np.ndarray      # shape (n_a, n_z)
    _flat: tuple = field(default=None, repr=False, compare=False)

    def flat(self):
        """Flattened (a, z, weight) arrays in a-major order, cached."""
        if self._flat is None:
            aa, zz = np.meshgrid(self.a_nodes, self.z_nodes, indexing="ij")
            self._flat = (aa.ravel(), zz.ravel(), self.weights.ravel())
        return self._flat

    def integrate(self, values):
        """Quadrature of values sampled on the flattened mesh."""
        _, _, w = self.flat()
        return float(np.sum(w * np.asarray(values, dtype=np.float64).ravel()))

    def integrate_grid(self, grid_values):
        return float(np.sum(self.weights * np.asarray(grid_values, dtype=np.float64)))


def _trapezoid_weights(nodes):
    h = (nodes[-1] - nodes[0]) / (len(nodes) - 1)
    w = np.full(len(nodes), h)
    w[0] = w[-1] = 0.5 * h
    return w


def build_mesh(model, n_a=101, n_z=101):
    """Uniform trapezoid mesh over [a_min, a_max] x [z_min, z_max]."""
    if n_a < 2 or n_z < 2:
        raise ConfigError(f"mesh needs at least 2 nodes per dimension, got {n_a}x{n_z}")
    a_nodes = np.linspace(model.a_min, model.a_max, n_a)
    z_nodes = np.linspace(model.z_min, model.z_max, n_z)
    weights = np.outer(_trapezoid_weights(a_nodes), _trapezoid_weights(z_nodes))
    return QuadratureMesh(a_nodes, z_nodes, weights)


def lattice_nodes(model, grid_per_dim=11):
    """The sampling lattice: grid_per_dim uniform nodes per input dimension."""
    return (
        np.linspace(model.a_min, model.a_max, grid_per_dim),
        np.linspace(model.z_min, model.z_max, grid_per_dim),
        np.linspace(0.0, model.horizon, grid_per_dim),
    )


def sample_batch(rng, model, n_interior=100, grid_per_dim=11, continuous=False):
    """Draw one collocation batch from the given RNG stream.

    Deterministic in the stream state: the draw order is fixed (interior,
    then the four faces in a_min/a_max/z_min/z_max order, then initial-time).
    Every boundary list reuses the interior batch size.
    """
    if grid_per_dim < 2:
        raise ConfigError(f"grid_per_dim must be >= 2, got {grid_per_dim}")
    a_lat, z_lat, t_lat = lattice_nodes(model, grid_per_dim)

    def draw(lat, lo, hi):
        if continuous:
            return rng.uniform(lo, hi, size=n_interior)
        return lat[rng.integers(0, grid_per_dim, size=n_interior)]

    def draw_a():
        return draw(a_lat, model.a_min, model.a_max)

    def draw_z():
        return draw(z_lat, model.z_min, model.z_max)

    def draw_t():
        return draw(t_lat, 0.0, model.horizon)

    interior = (draw_a(), draw_z(), draw_t())
    pin = np.full(n_interior, 0.0)
    boundary_a_min = (pin + model.a_min, draw_z(), draw_t())
    boundary_a_max = (pin + model.a_max, draw_z(), draw_t())
    boundary_z_min = (draw_a(), pin + model.z_min, draw_t())
    boundary_z_max = (draw_a(), pin + model.z_max, draw_t())
    initial_time = (draw_a(), draw_z())
    return CollocationBatch(
        interior=interior,
        boundary_a_min=boundary_a_min,
        boundary_a_max=boundary_a_max,
        boundary_z_min=boundary_z_min,
        boundary_z_max=boundary_z_max,
        initial_time=initial_time,
    )
