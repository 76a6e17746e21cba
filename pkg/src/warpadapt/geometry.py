"""Radial fisheye distortion, its numerical inverse, and image remapping.

The forward model maps a rectilinear point in normalized coordinates to
its fisheye position:

    r   = sqrt(x^2 + y^2)
    t   = arctan(r)
    t_d = t * (1 + k1*t^2 + k2*t^4 + k3*t^6 + k4*t^8)
    x'  = f * (t_d / r) * x + cx,   y' = f * (t_d / r) * y + cy

with the factor ``t_d / r -> 1`` as ``r -> 0``.  Smaller ``f`` bends the
image more.  There is no closed-form inverse; ``undistort_point`` solves
the scalar radius equation by Newton iteration with a bisection
safeguard.

Pixel grids are tied to normalized coordinates by mapping the longer
image axis to [-1, 1] about the pixel-center midpoint.  Protocol-level
focal values (75 / 125 / 150) are divided by ``f_unit`` (default 100) so
that f=100 means unit scale regardless of resolution; see
``fisheye_params``.
"""

from __future__ import annotations

import dataclasses
import struct

import numpy as np

from .tensor import Tensor

NEWTON_TOL = 1e-9
NEWTON_MAX_ITER = 50
DEFAULT_F_UNIT = 100.0
DEFAULT_WORKING_RADIUS = 1.5


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class DistortionParams:
    """Radial distortion profile in normalized coordinates.

    ``f`` is the raw scale multiplier of the distortion equation (use
    ``fisheye_params`` to build one from protocol units).  Construction
    verifies that the radial profile ``r -> f * t_d(arctan r)`` is
    strictly increasing over the working radius, sampled at 1024 points;
    non-monotone profiles are rejected because they have no usable
    inverse.
    """

    f: float
    k1: float = 0.0
    k2: float = 0.0
    k3: float = 0.0
    k4: float = 0.0
    center: tuple[float, float] = (0.0, 0.0)
    working_radius: float = DEFAULT_WORKING_RADIUS

    def __post_init__(self):
        values = [self.f, self.k1, self.k2, self.k3, self.k4,
                  self.center[0], self.center[1], self.working_radius]
        if not all(np.isfinite(values)):
            raise ValueError("distortion parameters must be finite")
        if self.f <= 0:
            raise ValueError(f"f must be positive, got {self.f}")
        if self.working_radius <= 0:
            raise ValueError("working radius must be positive")
        r = np.linspace(0.0, self.working_radius, 1024)
        profile = forward_radius(r, self)
        if not np.all(np.diff(profile) > 0):
            raise ValueError(
                "radial profile is not strictly increasing over the working "
                f"radius {self.working_radius}; adjust f/k1..k4"
            )

    @property
    def max_radius(self):
        """Largest distorted radius reachable from the working range."""
        return float(forward_radius(np.asarray(self.working_radius), self))


def fisheye_params(f, k1=0.0, k2=0.0, k3=0.0, k4=0.0, center=(0.0, 0.0),
                   f_unit=DEFAULT_F_UNIT, working_radius=DEFAULT_WORKING_RADIUS):
    """Build DistortionParams from protocol units (f=100 means unit scale)."""
    return DistortionParams(f=float(f) / float(f_unit), k1=k1, k2=k2, k3=k3, k4=k4,
                            center=(float(center[0]), float(center[1])),
                            working_radius=working_radius)


# ---------------------------------------------------------------------------
# forward / inverse radial profile
# ---------------------------------------------------------------------------


def forward_radius(r, params):
    """Distorted radius f * t_d(arctan r) for rectilinear radius r."""
    r = np.asarray(r, dtype=np.float64)
    t = np.arctan(r)
    t2 = t * t
    poly = 1.0 + t2 * (params.k1 + t2 * (params.k2 + t2 * (params.k3 + t2 * params.k4)))
    return params.f * t * poly


def _forward_radius_deriv(r, params):
    t = np.arctan(r)
    t2 = t * t
    dpoly = 1.0 + t2 * (3.0 * params.k1 + t2 * (5.0 * params.k2
                                                + t2 * (7.0 * params.k3 + t2 * 9.0 * params.k4)))
    return params.f * dpoly / (1.0 + r * r)


def _radial_scale(r, params):
    """f * t_d / r with the r -> 0 limit handled (equals f there)."""
    r = np.asarray(r, dtype=np.float64)
    safe = np.where(r > 1e-12, r, 1.0)
    return np.where(r > 1e-12, forward_radius(r, params) / safe, params.f)


def distort_point(p, params):
    """Map a normalized rectilinear point (x, y) to fisheye coordinates."""
    x, y = float(p[0]), float(p[1])
    if not (np.isfinite(x) and np.isfinite(y)):
        raise ValueError("point coordinates must be finite")
    r = np.hypot(x, y)
    s = float(_radial_scale(np.float64(r), params))
    return (s * x + params.center[0], s * y + params.center[1])


def invert_radius(rd, params):
    """Solve f * t_d(arctan r) = rd elementwise; returns (r, converged).

    Newton iteration from r = rd / f, falling back to bisection whenever
    a step leaves the bracket [0, working_radius] or the derivative is
    degenerate.  Convergence means a radius residual <= 1e-9 within 50
    iterations; callers treat non-converged entries as invalid.
    """
    rd = np.asarray(rd, dtype=np.float64)
    R = params.working_radius
    lo = np.zeros_like(rd)
    hi = np.full_like(rd, R)
    r = np.clip(rd / params.f, 0.0, R)
    g = forward_radius(r, params) - rd
    done = np.abs(g) <= NEWTON_TOL
    for _ in range(NEWTON_MAX_ITER):
        if done.all():
            break
        lo = np.where(~done & (g < 0), np.maximum(lo, r), lo)
        hi = np.where(~done & (g > 0), np.minimum(hi, r), hi)
        dg = _forward_radius_deriv(r, params)
        usable = np.abs(dg) > 1e-14
        step = np.where(usable, r - g / np.where(usable, dg, 1.0), 0.5 * (lo + hi))
        step = np.where((step < lo) | (step > hi), 0.5 * (lo + hi), step)
        r = np.where(done, r, step)
        g = np.where(done, g, forward_radius(r, params) - rd)
        done = done | (np.abs(g) <= NEWTON_TOL)
    return r, done


def undistort_point(p, params):
    """Invert ``distort_point``; raises when p' has no rectilinear preimage."""
    dx = float(p[0]) - params.center[0]
    dy = float(p[1]) - params.center[1]
    rd = np.hypot(dx, dy)
    if rd > params.max_radius + NEWTON_TOL:
        raise ValueError(
            f"distorted radius {rd:.6g} exceeds the maximum attainable "
            f"{params.max_radius:.6g} for these parameters"
        )
    if rd == 0.0:
        return (0.0, 0.0)
    r, ok = invert_radius(np.float64(min(rd, params.max_radius)), params)
    if not bool(ok):
        raise ValueError(f"radius inversion did not converge for rd={rd:.6g}")
    scale = float(r) / rd
    return (scale * dx, scale * dy)


# ---------------------------------------------------------------------------
# pixel <-> normalized coordinates
# ---------------------------------------------------------------------------


def normalization_scale(height, width):
    """Half-extent of the longer axis in pixels (maps it to [-1, 1])."""
    return (max(height, width) - 1) / 2.0


def pixel_to_normalized(rows, cols, height, width):
    s = normalization_scale(height, width)
    cy = (height - 1) / 2.0
    cx = (width - 1) / 2.0
    return (np.asarray(cols, dtype=np.float64) - cx) / s, (np.asarray(rows, dtype=np.float64) - cy) / s


def normalized_to_pixel(x, y, height, width):
    s = normalization_scale(height, width)
    cy = (height - 1) / 2.0
    cx = (width - 1) / 2.0
    return np.asarray(x, dtype=np.float64) * s + cx, np.asarray(y, dtype=np.float64) * s + cy


# ---------------------------------------------------------------------------
# warp fields
# ---------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class WarpField:
    """Per-output-pixel source coordinates for inverse-map resampling.

    ``u`` / ``v`` hold the source column / row (in source pixel units)
    for each output pixel; ``valid`` marks pixels with an in-frame
    source.  Arrays are locked read-only at construction.
    """

    height: int
    width: int
    u: np.ndarray
    v: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        shape = (self.height, self.width)
        for name in ("u", "v", "valid"):
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            arr.setflags(write=False)

    @staticmethod
    def from_arrays(u, v, valid):
        u = np.ascontiguousarray(u, dtype=np.float64)
        v = np.ascontiguousarray(v, dtype=np.float64)
        valid = np.ascontiguousarray(valid, dtype=bool)
        h, w = u.shape
        return WarpField(height=h, width=w, u=u, v=v, valid=valid)

    @property
    def valid_fraction(self):
        return float(self.valid.mean())


def identity_warp_field(height, width):
    """Field where every output pixel sources from its own coordinates."""
    v, u = np.meshgrid(np.arange(height, dtype=np.float64),
                       np.arange(width, dtype=np.float64), indexing="ij")
    return WarpField.from_arrays(u, v, np.ones((height, width), dtype=bool))


def build_warp_field(out_size, in_size, params):
    """Warp field that synthesizes a fisheye view from a rectilinear source.

    Each output (fisheye) pixel is traced back through the numerical
    inverse of the distortion to its rectilinear source position.
    Pixels whose distorted radius exceeds the attainable maximum, whose
    inversion fails to converge, or whose source falls outside the
    source frame are marked invalid.
    """
    Ho, Wo = out_size
    Hi, Wi = in_size
    if Ho < 1 or Wo < 1 or Hi < 1 or Wi < 1:
        raise ValueError("sizes must be positive")
    rows, cols = np.meshgrid(np.arange(Ho), np.arange(Wo), indexing="ij")
    x, y = pixel_to_normalized(rows, cols, Ho, Wo)
    dx = x - params.center[0]
    dy = y - params.center[1]
    rd = np.hypot(dx, dy)
    in_range = rd <= params.max_radius + NEWTON_TOL
    r, converged = invert_radius(np.minimum(rd, params.max_radius), params)
    safe_rd = np.where(rd > 1e-12, rd, 1.0)
    scale = np.where(rd > 1e-12, r / safe_rd, 0.0)
    u, v = normalized_to_pixel(scale * dx, scale * dy, Hi, Wi)
    in_frame = (u >= 0.0) & (u <= Wi - 1.0) & (v >= 0.0) & (v <= Hi - 1.0)
    valid = in_range & converged & in_frame
    return WarpField.from_arrays(u, v, valid)


def build_unwarp_field(out_size, in_size, params):
    """Warp field that rectifies a fisheye view back to rectilinear.

    Each output (rectilinear) pixel maps forward through the distortion
    to its position in the fisheye source frame.
    """
    Ho, Wo = out_size
    Hi, Wi = in_size
    if Ho < 1 or Wo < 1 or Hi < 1 or Wi < 1:
        raise ValueError("sizes must be positive")
    rows, cols = np.meshgrid(np.arange(Ho), np.arange(Wo), indexing="ij")
    x, y = pixel_to_normalized(rows, cols, Ho, Wo)
    r = np.hypot(x, y)
    scale = _radial_scale(r, params)
    xd = scale * x + params.center[0]
    yd = scale * y + params.center[1]
    u, v = normalized_to_pixel(xd, yd, Hi, Wi)
    in_frame = (u >= 0.0) & (u <= Wi - 1.0) & (v >= 0.0) & (v <= Hi - 1.0)
    valid = (r <= params.working_radius) & in_frame
    return WarpField.from_arrays(u, v, valid)


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------


def _bilinear_gather(planes, u, v):
    """Sample [C, H, W] planes at fractional (u, v); zero outside."""
    C, H, W = planes.shape
    x0 = np.floor(u).astype(np.int64)
    y0 = np.floor(v).astype(np.int64)
    fu = u - x0
    fv = v - y0
    out = np.zeros((C,) + u.shape)
    for dy, dx, wgt in ((0, 0, (1 - fv) * (1 - fu)), (0, 1, (1 - fv) * fu),
                        (1, 0, fv * (1 - fu)), (1, 1, fv * fu)):
        yy = y0 + dy
        xx = x0 + dx
        ok = (yy >= 0) & (yy < H) & (xx >= 0) & (xx < W)
        vals = planes[:, np.clip(yy, 0, H - 1), np.clip(xx, 0, W - 1)]
        out += vals * (wgt * ok)
    return out


def remap_image(img, field):
    """Resample a [C, H, W] image through a warp field (bilinear).

    Invalid output pixels are black (zero).  Accepts a Tensor or a
    numpy array and returns the same kind.
    """
    is_tensor = isinstance(img, Tensor)
    data = img.data if is_tensor else np.asarray(img, dtype=np.float64)
    if data.ndim != 3:
        raise ValueError(f"remap_image expects [C,H,W], got {data.shape}")
    out = _bilinear_gather(data, field.u, field.v)
    out *= field.valid
    return Tensor(out) if is_tensor else out


def remap_labels(labels, field, void_id):
    """Resample an integer [H, W] label map (nearest neighbor).

    Invalid output pixels and out-of-frame sources become ``void_id``.
    """
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError(f"remap_labels expects [H,W], got {labels.shape}")
    H, W = labels.shape
    ui = np.rint(field.u).astype(np.int64)
    vi = np.rint(field.v).astype(np.int64)
    ok = field.valid & (ui >= 0) & (ui < W) & (vi >= 0) & (vi < H)
    picked = labels[np.clip(vi, 0, H - 1), np.clip(ui, 0, W - 1)]
    return np.where(ok, picked, void_id).astype(labels.dtype)


# ---------------------------------------------------------------------------
# binary sidecar
# ---------------------------------------------------------------------------

_FIELD_MAGIC = b"WARP"
_FIELD_VERSION = 1
_FIELD_RECORD = np.dtype([("u", "<f4"), ("v", "<f4"), ("valid", "u1")])


def save_warp_field(field, path):
    """Write a field as the binary sidecar: magic, version, size, records."""
    records = np.empty(field.height * field.width, dtype=_FIELD_RECORD)
    records["u"] = field.u.ravel()
    records["v"] = field.v.ravel()
    records["valid"] = field.valid.ravel()
    with open(path, "wb") as fh:
        fh.write(_FIELD_MAGIC)
        fh.write(struct.pack("<HII", _FIELD_VERSION, field.height, field.width))
        fh.write(records.tobytes())


def load_warp_field(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _FIELD_MAGIC:
            raise ValueError(f"{path}: not a warp-field file (bad magic {magic!r})")
        version, h, w = struct.unpack("<HII", fh.read(10))
        if version != _FIELD_VERSION:
            raise ValueError(f"{path}: unsupported warp-field version {version}")
        raw = fh.read(h * w * _FIELD_RECORD.itemsize)
        if len(raw) != h * w * _FIELD_RECORD.itemsize:
            raise ValueError(f"{path}: truncated warp-field payload")
    records = np.frombuffer(raw, dtype=_FIELD_RECORD)
    u = records["u"].astype(np.float64).reshape(h, w)
    v = records["v"].astype(np.float64).reshape(h, w)
    valid = records["valid"].astype(bool).reshape(h, w)
    return WarpField.from_arrays(u, v, valid)
