"""Dense float64 tensors with reverse-mode automatic differentiation.

Every primitive needed by the segmentation network lives here with a
hand-derived backward rule: elementwise arithmetic, matmul, conv2d,
batch normalization, bilinear sampling (differentiable in the sample
coordinates, which is what makes deformable convolutions trainable),
2x bilinear upsampling, softmax and the masked weighted cross-entropy
loss.

Conventions:
  * all floating data is float64, stored row-major;
  * image-like tensors are [B, C, H, W];
  * sample coordinates are (u, v) = (column, row), so an integer pair
    (u, v) addresses map[..., v, u];
  * out-of-bounds bilinear neighbors contribute zero (zero padding),
    which matches the zero padding used by conv2d.

Gradients accumulate: ``backward()`` adds into ``.grad`` buffers, and a
single backward pass touches each parameter exactly once.
"""

from __future__ import annotations

import contextlib

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (eval / data plumbing)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled():
    return _grad_enabled


class Tensor:
    """A dense float64 array plus an optional gradient buffer.

    Operations on tensors that require gradients record a backward
    closure; ``backward()`` replays the recorded graph in reverse
    topological order.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def zeros(shape, requires_grad=False):
        return Tensor(np.zeros(shape), requires_grad=requires_grad)

    @staticmethod
    def from_op(data, parents, backward):
        """Result tensor of a primitive; records the rule when grads are on."""
        out = Tensor(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    # -- basic properties -----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    # -- autodiff -------------------------------------------------------------

    def backward(self, gradient=None):
        """Accumulate gradients of ``self`` into every reachable ``.grad``.

        ``gradient`` defaults to ones (the usual scalar-loss seed).  Each
        recorded primitive fires exactly once per call.
        """
        if gradient is None:
            gradient = np.ones_like(self.data)
        else:
            gradient = np.asarray(gradient, dtype=np.float64)
            if gradient.shape != self.data.shape:
                raise ValueError("backward seed shape must match tensor shape")

        order = []
        seen = set()

        def visit(t):
            if id(t) in seen:
                return
            seen.add(id(t))
            for p in t._parents:
                visit(p)
            order.append(t)

        visit(self)
        _accumulate(self, gradient)
        for t in reversed(order):
            if t._backward is not None:
                t._backward(t.grad)

    # -- operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, scalar):
        if isinstance(scalar, Tensor):
            raise TypeError("tensor/tensor division is not supported")
        return mul(self, Tensor(np.float64(1.0 / scalar)))

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def sum(self):
        return tensor_sum(self)

    def mean(self):
        return mul(tensor_sum(self), Tensor(np.float64(1.0 / self.data.size)))


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / structural primitives
# ---------------------------------------------------------------------------


def add(a, b):
    out_data = a.data + b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return Tensor.from_op(out_data, (a, b), backward)


def mul(a, b):
    out_data = a.data * b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return Tensor.from_op(out_data, (a, b), backward)


def neg(a):
    def backward(g):
        _accumulate(a, -g)

    return Tensor.from_op(-a.data, (a,), backward)


def reshape(a, shape):
    old = a.data.shape

    def backward(g):
        _accumulate(a, g.reshape(old))

    return Tensor.from_op(a.data.reshape(shape), (a,), backward)


def tensor_sum(a):
    def backward(g):
        _accumulate(a, np.full(a.data.shape, float(g)))

    return Tensor.from_op(a.data.sum(), (a,), backward)


def index_axis(a, axis, index):
    """Select one slice along ``axis`` (the axis is removed)."""
    out_data = np.take(a.data, index, axis=axis)

    def backward(g):
        if not a.requires_grad:
            return
        ga = np.zeros_like(a.data)
        sl = [slice(None)] * a.data.ndim
        sl[axis] = index
        ga[tuple(sl)] = g
        _accumulate(a, ga)

    return Tensor.from_op(out_data, (a,), backward)


def concat(tensors, axis=1):
    """Concatenate along ``axis``; backward splits the gradient."""
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    sizes = [t.data.shape[axis] for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(idx)])

    return Tensor.from_op(out_data, tuple(tensors), backward)


def relu(a):
    mask = a.data > 0

    def backward(g):
        _accumulate(a, g * mask)

    return Tensor.from_op(np.where(mask, a.data, 0.0), (a,), backward)


def matmul(a, b):
    """Batched matrix product with numpy broadcasting on leading axes."""
    out_data = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        _accumulate(a, _unbroadcast(ga, a.data.shape))
        _accumulate(b, _unbroadcast(gb, b.data.shape))

    return Tensor.from_op(out_data, (a, b), backward)


def softmax(a, axis=1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accumulate(a, y * (g - dot))

    return Tensor.from_op(y, (a,), backward)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def conv2d_output_size(size, kernel, stride, dilation, padding):
    span = dilation * (kernel - 1) + 1
    return (size + 2 * padding - span) // stride + 1


def conv2d(x, weight, bias, stride=1, dilation=1, padding=0):
    """2D cross-correlation with zero padding.

    ``x`` is [B, C, H, W], ``weight`` [O, C, k, k] with odd square k,
    ``bias`` [O].  Gradient rules are registered for all three inputs.
    """
    xd, wd = x.data, weight.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise ValueError(f"conv2d expects 4D input and weight, got {xd.shape} and {wd.shape}")
    B, C, H, W = xd.shape
    O, Cw, kh, kw = wd.shape
    if kh != kw:
        raise ValueError(f"conv2d kernel must be square, got {kh}x{kw}")
    if kh % 2 == 0:
        raise ValueError(f"conv2d kernel size must be odd, got {kh}")
    if Cw != C:
        raise ValueError(f"conv2d channel mismatch: input has {C}, weight expects {Cw}")
    if bias.data.shape != (O,):
        raise ValueError(f"conv2d bias must have shape ({O},), got {bias.data.shape}")
    k = kh
    Ho = conv2d_output_size(H, k, stride, dilation, padding)
    Wo = conv2d_output_size(W, k, stride, dilation, padding)
    if Ho < 1 or Wo < 1:
        raise ValueError(f"conv2d output would be empty for input {H}x{W}")

    if padding:
        xp = np.zeros((B, C, H + 2 * padding, W + 2 * padding))
        xp[:, :, padding:padding + H, padding:padding + W] = xd
    else:
        xp = xd
    L = Ho * Wo
    K = k * k
    w2 = wd.reshape(O, C * K)

    def tap_window(arr, t):
        i, j = divmod(t, k)
        return arr[:,
                   i * dilation: i * dilation + (Ho - 1) * stride + 1: stride,
                   j * dilation: j * dilation + (Wo - 1) * stride + 1: stride]

    def sample_columns(b):
        """im2col matrix [C*K, L] for one sample (channel-major, tap-minor)."""
        cols = np.empty((C, K, L))
        for t in range(K):
            cols[:, t] = tap_window(xp[b], t).reshape(C, L)
        return cols.reshape(C * K, L)

    # one large matmul per sample keeps the BLAS inner dimension at C*K
    # while bounding scratch memory to a single sample's column matrix
    out = np.empty((B, O, L))
    for b in range(B):
        np.matmul(w2, sample_columns(b), out=out[b])
    out += bias.data[None, :, None]
    out = out.reshape(B, O, Ho, Wo)

    def backward(g):
        g2 = g.reshape(B, O, L)
        if bias.requires_grad:
            _accumulate(bias, g2.sum(axis=(0, 2)))
        if weight.requires_grad:
            dw = np.zeros((O, C * K))
            for b in range(B):
                dw += np.matmul(g2[b], sample_columns(b).T)
            _accumulate(weight, dw.reshape(wd.shape))
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for b in range(B):
                dcols = np.matmul(w2.T, g2[b]).reshape(C, K, L)
                for t in range(K):
                    tap_window(dxp[b], t)[...] += dcols[:, t].reshape(C, Ho, Wo)
            if padding:
                dx = dxp[:, :, padding:padding + H, padding:padding + W]
            else:
                dx = dxp
            _accumulate(x, dx)

    return Tensor.from_op(out, (x, weight, bias), backward)


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------


def batch_norm2d(x, gamma, beta, running_mean, running_var, momentum, eps, training):
    """Per-channel batch normalization over [B, C, H, W].

    Training mode normalizes with the batch statistics (biased variance)
    and updates ``running_mean`` / ``running_var`` in place (the variance
    update uses the unbiased estimate).  Eval mode normalizes with the
    running statistics.  Gradients are registered for x, gamma and beta.
    """
    xd = x.data
    if xd.ndim != 4:
        raise ValueError(f"batch_norm2d expects [B,C,H,W], got {xd.shape}")
    B, C, H, W = xd.shape
    if gamma.data.shape != (C,) or beta.data.shape != (C,):
        raise ValueError("gamma/beta must be per-channel vectors")
    axes = (0, 2, 3)
    n = B * H * W

    if training:
        if n < 2:
            raise ValueError(f"batch_norm2d training mode needs B*H*W >= 2, got {n}")
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * (n / (n - 1))
    else:
        mean = running_mean.copy()
        var = running_var.copy()

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def backward(g):
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).sum(axis=axes))
        if beta.requires_grad:
            _accumulate(beta, g.sum(axis=axes))
        if x.requires_grad:
            scale = (gamma.data * inv_std)[None, :, None, None]
            if training:
                gm = g.mean(axis=axes)[None, :, None, None]
                gxm = (g * xhat).mean(axis=axes)[None, :, None, None]
                _accumulate(x, scale * (g - gm - xhat * gxm))
            else:
                _accumulate(x, scale * g)

    return Tensor.from_op(out, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# bilinear sampling
# ---------------------------------------------------------------------------


def _gather_neighbor(flat, iy, ix, H, W):
    """Pick map values at integer (iy, ix) with zero outside [0,H)x[0,W).

    ``flat`` is [B, C, H*W]; iy/ix are [B, K, L] integer arrays.
    Returns values [B, C, K, L] and the validity mask [B, 1, K, L].
    """
    valid = (iy >= 0) & (iy < H) & (ix >= 0) & (ix < W)
    idx = np.clip(iy, 0, H - 1) * W + np.clip(ix, 0, W - 1)
    B, K, L = idx.shape
    vals = np.take_along_axis(flat, idx.reshape(B, 1, K * L), axis=2)
    vals = vals.reshape(B, flat.shape[1], K, L)
    vals = np.where(valid[:, None, :, :], vals, 0.0)
    return vals, valid[:, None, :, :]


def deform_sample(x, du, dv, base_u, base_v):
    """Bilinear sampling of a feature map at per-tap fractional positions.

    ``x`` is [B, C, H, W].  ``du`` / ``dv`` are [B, K, L] coordinate
    offsets (tensors), added to the fixed grids ``base_u`` / ``base_v``
    ([K, L] arrays in (column, row) pixel units of ``x``).  The result is
    [B, C, K, L].  Positions outside the map read as zero; gradients are
    registered for both the map values and the offsets.  Nothing large
    is retained for backward: neighbor values are regathered there.
    """
    xd = x.data
    B, C, H, W = xd.shape

    def coords():
        u = base_u[None, :, :] + du.data
        v = base_v[None, :, :] + dv.data
        x0 = np.floor(u).astype(np.int64)
        y0 = np.floor(v).astype(np.int64)
        return x0, y0, u - x0, v - y0

    x0, y0, fu, fv = coords()
    flat = xd.reshape(B, C, H * W)
    fu_b = fu[:, None, :, :]
    fv_b = fv[:, None, :, :]
    out = None
    for dy, dx, wgt in ((0, 0, (1.0 - fv_b) * (1.0 - fu_b)), (0, 1, (1.0 - fv_b) * fu_b),
                        (1, 0, fv_b * (1.0 - fu_b)), (1, 1, fv_b * fu_b)):
        vals, _ = _gather_neighbor(flat, y0 + dy, x0 + dx, H, W)
        term = wgt * vals
        out = term if out is None else out + term

    def backward(g):
        x0, y0, fu, fv = coords()
        fu_b = fu[:, None, :, :]
        fv_b = fv[:, None, :, :]
        flat = xd.reshape(B, C, H * W)
        neighbors = ((y0, x0, (1.0 - fv_b) * (1.0 - fu_b)),
                     (y0, x0 + 1, (1.0 - fv_b) * fu_b),
                     (y0 + 1, x0, fv_b * (1.0 - fu_b)),
                     (y0 + 1, x0 + 1, fv_b * fu_b))
        if x.requires_grad:
            dflat = np.zeros(B * C * H * W)
            stride_bc = (np.arange(B * C).reshape(B, C, 1, 1)) * (H * W)
            for iy, ix, wgt in neighbors:
                mask = (iy >= 0) & (iy < H) & (ix >= 0) & (ix < W)
                idx = np.clip(iy, 0, H - 1) * W + np.clip(ix, 0, W - 1)
                full_idx = (idx[:, None, :, :] + stride_bc).ravel()
                contrib = (g * (wgt * mask[:, None, :, :])).ravel()
                dflat += np.bincount(full_idx, weights=contrib, minlength=dflat.size)
            _accumulate(x, dflat.reshape(B, C, H, W))
        if du.requires_grad or dv.requires_grad:
            sums = []
            for iy, ix, _ in neighbors:
                vals, _ = _gather_neighbor(flat, iy, ix, H, W)
                sums.append(np.einsum("bckl,bckl->bkl", g, vals))
            s00, s01, s10, s11 = sums
            if du.requires_grad:
                _accumulate(du, (1.0 - fv) * (s01 - s00) + fv * (s11 - s10))
            if dv.requires_grad:
                _accumulate(dv, (1.0 - fu) * (s10 - s00) + fu * (s11 - s01))

    return Tensor.from_op(out, (x, du, dv), backward)


def conv2d_sampled(x, du, dv, weight, bias, base_u, base_v, out_hw):
    """Convolution whose taps read the input at shifted bilinear positions.

    For each kernel tap t (row-major over the k x k grid) the input is
    sampled at ``(base_u[t] + du[:, t], base_v[t] + dv[:, t])`` and
    contracted with ``weight[:, :, t]``.  Each sample's gathered taps form
    the same [C*K, L] column matrix ``conv2d`` builds and feed the same
    per-sample matmul, so zero offsets reproduce ``conv2d`` bitwise.
    Sampling semantics match ``deform_sample`` (bilinear, zero outside).
    Memory stays at one sample's column matrix; backward regathers what
    it needs.
    """
    xd, wd = x.data, weight.data
    B, C, H, W = xd.shape
    O = wd.shape[0]
    k = wd.shape[2]
    K = k * k
    Ho, Wo = out_hw
    L = Ho * Wo
    if du.shape != (B, K, L) or dv.shape != (B, K, L):
        raise ValueError(f"offset shapes {du.shape}/{dv.shape} != {(B, K, L)}")
    w2 = wd.reshape(O, C * K)
    flat = xd.reshape(B, C, H * W)

    KL = K * L

    def corner_geometry(b):
        """Sampling geometry for every tap of one sample.

        Returns per-corner clipped flat indices ``idx`` and effective
        bilinear weights ``w`` of shape [4, K, L] (out-of-bounds corners
        get weight zero, which implements the read-as-zero border), the
        in-bounds masks ``inb``, and the fractional parts ``fu``/``fv``
        of shape [K, L].  Corner order: (y0,x0), (y0,x0+1), (y0+1,x0),
        (y0+1,x0+1).
        """
        u = base_u + du.data[b]
        v = base_v + dv.data[b]
        xf = np.floor(u)
        yf = np.floor(v)
        fu = u - xf
        fv = v - yf
        x0 = xf.astype(np.int64)
        y0 = yf.astype(np.int64)
        ys = np.stack((y0, y0, y0 + 1, y0 + 1))
        xs = np.stack((x0, x0 + 1, x0, x0 + 1))
        one_fu = 1.0 - fu
        one_fv = 1.0 - fv
        w = np.stack((one_fv * one_fu, one_fv * fu, fv * one_fu, fv * fu))
        inb = (ys >= 0) & (ys < H) & (xs >= 0) & (xs < W)
        w *= inb
        idx = np.clip(ys, 0, H - 1) * W + np.clip(xs, 0, W - 1)
        return idx, inb, w, fu, fv

    def corner_read(flat_b, idx, n):
        """One corner's reads for every tap, [C, K, L] (border-clipped)."""
        return flat_b[:, idx[n].reshape(-1)].reshape(C, K, L)

    def corner_accumulate(flat_b, idx, w):
        # left-to-right corner sum; reproduces the plain conv2d column
        # matrix when the weights degenerate to (1, 0, 0, 0)
        cols = w[0] * corner_read(flat_b, idx, 0)
        for n in range(1, 4):
            cols += w[n] * corner_read(flat_b, idx, n)
        return cols

    out = np.empty((B, O, L))
    for b in range(B):
        idx, _, w, _, _ = corner_geometry(b)
        cols = corner_accumulate(flat[b], idx, w)
        np.matmul(w2, cols.reshape(C * K, L), out=out[b])
    out += bias.data[None, :, None]
    out = out.reshape(B, O, Ho, Wo)

    def backward(g):
        g2 = g.reshape(B, O, L)
        if bias.requires_grad:
            _accumulate(bias, g2.sum(axis=(0, 2)))
        need_pos = du.requires_grad or dv.requires_grad
        dw = np.zeros((O, C * K)) if weight.requires_grad else None
        dflat = np.zeros((B, C, H * W)) if x.requires_grad else None
        ddu = np.zeros_like(du.data) if du.requires_grad else None
        ddv = np.zeros_like(dv.data) if dv.requires_grad else None
        for b in range(B):
            idx, inb, w, fu, fv = corner_geometry(b)
            flat_b = flat[b]
            if dw is not None:
                cols = corner_accumulate(flat_b, idx, w)
                dw += np.matmul(g2[b], cols.reshape(C * K, L).T)
            if dflat is None and not need_pos:
                continue
            gcols = np.matmul(w2.T, g2[b]).reshape(C, K, L)
            if dflat is not None:
                contrib = np.empty((C, 4, KL))
                for n in range(4):
                    np.multiply(gcols, w[n], out=contrib[:, n].reshape(C, K, L))
                flat_idx = idx.reshape(-1)
                dest = dflat[b]
                for c in range(C):
                    dest[c] += np.bincount(flat_idx,
                                           weights=contrib[c].reshape(-1),
                                           minlength=H * W)
            if need_pos:
                gflat = gcols.reshape(C, KL)
                s = np.empty((4, K, L))
                for n in range(4):
                    reads = flat_b[:, idx[n].reshape(-1)]
                    s[n] = np.einsum("cl,cl->l", gflat, reads).reshape(K, L)
                s *= inb  # clipped out-of-bounds reads contribute nothing
                if ddu is not None:
                    ddu[b] = (1.0 - fv) * (s[1] - s[0]) + fv * (s[3] - s[2])
                if ddv is not None:
                    ddv[b] = (1.0 - fu) * (s[2] - s[0]) + fu * (s[3] - s[1])
        if dw is not None:
            _accumulate(weight, dw.reshape(wd.shape))
        if dflat is not None:
            _accumulate(x, dflat.reshape(B, C, H, W))
        if ddu is not None:
            _accumulate(du, ddu)
        if ddv is not None:
            _accumulate(dv, ddv)

    return Tensor.from_op(out, (x, du, dv, weight, bias), backward)


def bilinear_sample(feature_map, u, v):
    """Sample a [C, H, W] map at one fractional (u, v) = (column, row).

    ``u`` and ``v`` may be floats or scalar tensors; in the latter case
    coordinate gradients flow back to them.  Returns a [C] tensor; points
    outside the map read as zero per missing neighbor.
    """
    if feature_map.ndim != 3:
        raise ValueError(f"bilinear_sample expects [C,H,W], got {feature_map.shape}")
    ut = u if isinstance(u, Tensor) else Tensor(np.float64(u))
    vt = v if isinstance(v, Tensor) else Tensor(np.float64(v))
    C, H, W = feature_map.shape
    x4 = reshape(feature_map, (1, C, H, W))
    du = reshape(ut, (1, 1, 1))
    dv = reshape(vt, (1, 1, 1))
    zero = np.zeros((1, 1))
    out = deform_sample(x4, du, dv, zero, zero)
    return reshape(out, (C,))


# ---------------------------------------------------------------------------
# upsampling
# ---------------------------------------------------------------------------


def _upsample_indices(n):
    src = (np.arange(2 * n) + 0.5) / 2.0 - 0.5
    i0 = np.floor(src).astype(np.int64)
    t = src - i0
    return np.clip(i0, 0, n - 1), np.clip(i0 + 1, 0, n - 1), t


def _upsample1d_adjoint(g, n):
    """Adjoint of 2x bilinear interpolation along the last axis.

    With border clamping the doubled axis has fixed interpolation weights
    (0.25/0.75 in the interior, 1.0 at the two edge samples), so the
    scatter reduces to four strided slice sums.
    """
    dx = np.empty(g.shape[:-1] + (n,))
    if n == 1:
        dx[..., 0] = g[..., 0] + g[..., 1]
        return dx
    dx[..., 0] = g[..., 0] + 0.75 * g[..., 1] + 0.25 * g[..., 2]
    dx[..., n - 1] = (g[..., 2 * n - 1] + 0.75 * g[..., 2 * n - 2]
                     + 0.25 * g[..., 2 * n - 3])
    if n > 2:
        dx[..., 1:n - 1] = (0.25 * g[..., 1:2 * n - 4:2]
                            + 0.75 * g[..., 2:2 * n - 3:2]
                            + 0.75 * g[..., 3:2 * n - 2:2]
                            + 0.25 * g[..., 4:2 * n - 1:2])
    return dx


def upsample_bilinear2x(x):
    """Double H and W of a [B, C, H, W] tensor by bilinear interpolation.

    Edge samples clamp to the border, so constant maps stay constant.
    """
    xd = x.data
    if xd.ndim != 4:
        raise ValueError(f"upsample_bilinear2x expects [B,C,H,W], got {xd.shape}")
    B, C, H, W = xd.shape
    h0, h1, th = _upsample_indices(H)
    w0, w1, tw = _upsample_indices(W)
    th_col = th[:, None]

    mid = xd[:, :, h0, :] * (1.0 - th_col) + xd[:, :, h1, :] * th_col
    out = mid[:, :, :, w0] * (1.0 - tw) + mid[:, :, :, w1] * tw

    def backward(g):
        if not x.requires_grad:
            return
        dmid = _upsample1d_adjoint(g, W)
        dx = _upsample1d_adjoint(dmid.swapaxes(-1, -2), H).swapaxes(-1, -2)
        _accumulate(x, dx)

    return Tensor.from_op(out, (x,), backward)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def weighted_cross_entropy(logits, labels, class_weights, void_id):
    """Class-weighted cross-entropy over non-void pixels.

    ``logits`` is a [B, C, H, W] tensor, ``labels`` an integer [B, H, W]
    array whose entries are class ids or ``void_id``.  The loss is the
    mean over non-void pixels of ``w[c] * (-log softmax(logits)[c])``;
    void pixels are excluded from both the sum and the normalizer.
    """
    ld = logits.data
    labels = np.asarray(labels)
    if ld.ndim != 4:
        raise ValueError(f"weighted_cross_entropy expects [B,C,H,W] logits, got {ld.shape}")
    B, C, H, W = ld.shape
    if labels.shape != (B, H, W):
        raise ValueError(f"labels shape {labels.shape} does not match logits {ld.shape}")
    weights = np.asarray(class_weights, dtype=np.float64)
    if weights.shape != (C,):
        raise ValueError(f"class_weights must have shape ({C},), got {weights.shape}")

    valid = labels != void_id
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("weighted_cross_entropy: every pixel is void")
    labels_int = labels.astype(np.int64)
    if np.any((labels_int[valid] < 0) | (labels_int[valid] >= C)):
        raise ValueError("labels contain class ids outside [0, C)")
    safe = np.where(valid, labels_int, 0)

    shifted = ld - ld.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1)) + ld.max(axis=1)
    picked = np.take_along_axis(ld, safe[:, None, :, :], axis=1)[:, 0]
    pix_w = np.where(valid, weights[safe], 0.0)
    loss = float((pix_w * (lse - picked)).sum() / n_valid)

    def backward(g):
        if not logits.requires_grad:
            return
        coef = (pix_w * (float(g) / n_valid))[:, None, :, :]
        p = np.exp(ld - lse[:, None, :, :])
        grad = p * coef
        idx = safe[:, None, :, :]
        np.put_along_axis(grad, idx, np.take_along_axis(grad, idx, axis=1) - coef, axis=1)
        _accumulate(logits, grad)

    return Tensor.from_op(np.float64(loss), (logits,), backward)
