"""Finite-difference verification of autodiff gradients.

The analytic gradients produced by ``tensor.py`` are compared with
central differences, one coordinate at a time.  Interpolation gradients
are only piecewise smooth, so coordinates used for those checks must be
kept away from the integer lattice; ``off_lattice_values`` samples such
positions by construction and ``assert_off_lattice`` rejects any that
drift too close.
"""

from __future__ import annotations

import numpy as np


def numerical_gradient(f, array, coords, h=1e-5):
    """Central-difference gradient of scalar ``f()`` at selected coords.

    ``f`` must be a zero-argument callable whose value depends on
    ``array`` (a numpy buffer that is perturbed in place).  ``coords`` is
    a sequence of flat indices; returns one estimate per coordinate.
    """
    flat = array.reshape(-1)
    out = np.empty(len(coords))
    for i, c in enumerate(coords):
        orig = flat[c]
        flat[c] = orig + h
        f_plus = float(f())
        flat[c] = orig - h
        f_minus = float(f())
        flat[c] = orig
        out[i] = (f_plus - f_minus) / (2.0 * h)
    return out


def relative_error(analytic, numeric, floor=1e-6):
    """|a - n| / max(|a|, |n|, floor), elementwise max over the arrays."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_gradients(loss_fn, tensors, h=1e-5, max_coords=24, rng=None):
    """Compare backprop gradients of ``loss_fn`` against finite differences.

    ``loss_fn`` is a zero-argument callable that rebuilds the graph from
    the current ``.data`` of the given tensors and returns a scalar
    tensor.  For each tensor up to ``max_coords`` coordinates are probed
    (all of them when the tensor is small).  Returns the worst relative
    error over every probed coordinate.
    """
    rng = rng or np.random.default_rng(0)
    loss = loss_fn()
    for t in tensors:
        t.zero_grad()
    loss.backward()
    analytic = {id(t): np.array(t.grad).reshape(-1) for t in tensors}

    def scalar():
        return loss_fn().item()

    worst = 0.0
    for t in tensors:
        n = t.data.size
        if n <= max_coords:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=max_coords, replace=False)
        numeric = numerical_gradient(scalar, t.data, coords, h=h)
        err = relative_error(analytic[id(t)][coords], numeric)
        worst = max(worst, err)
    return worst


def off_lattice_values(rng, shape, low=-3, high=3, margin=1e-3):
    """Sample floats whose fractional part stays in [margin, 1 - margin].

    Guarantees every value is at least ``margin`` away from any integer,
    which keeps central differences inside one bilinear cell.
    """
    base = rng.integers(low, high, size=shape).astype(np.float64)
    frac = rng.uniform(margin * 2, 1.0 - margin * 2, size=shape)
    return base + frac


def assert_off_lattice(values, margin=1e-3):
    """Reject coordinates within ``margin`` of an integer lattice line."""
    values = np.asarray(values, dtype=np.float64)
    frac = values - np.floor(values)
    dist = np.minimum(frac, 1.0 - frac)
    if np.any(dist < margin):
        worst = float(dist.min())
        raise ValueError(
            f"sample coordinates lie within {margin} of the integer lattice "
            f"(closest distance {worst:.2e}); gradients are not smooth there"
        )
