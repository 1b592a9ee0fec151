"""Forward/backward kernels for the layer set of the 3D-2D-CNN-BLSTM network.

Activations are channel-last. Video tensors are ``(B, T, H, W, C)``; a 4-D
``(T, H, W, C)`` input is treated as a batch of one and returned 4-D.
Sequences are ``(B, T, D)`` or ``(T, D)``.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import Tensor, get_dtype

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible; names the offending axis."""


def _triple(v):
    if np.isscalar(v):
        return (int(v),) * 3
    return tuple(v)


def _pad_pairs(pad, n):
    if np.isscalar(pad):
        pad = (pad,) * n
    out = []
    for p in pad:
        if np.isscalar(p):
            out.append((int(p), int(p)))
        else:
            lo, hi = p
            out.append((int(lo), int(hi)))
    return out


def out_size(size, kernel, stride, pad_lo, pad_hi=None):
    """Output length along one axis: floor((in + pads - k) / stride) + 1."""
    if pad_hi is None:
        pad_hi = pad_lo
    return (size + pad_lo + pad_hi - kernel) // stride + 1


# ---------------------------------------------------------------------------
# convolution kernels (numpy level)


# frames per chunk are chosen so one chunk's unfolded patches stay cache sized
_CHUNK_FLOATS = 1 << 19


def _im2col(frames, kh, kw, sh, sw, ho, wo):
    """Spatial unfolding of ``(n, Hp, Wp, C)`` frames into ``(n * ho * wo, kh * kw * C)``."""
    n, _, _, c = frames.shape
    s = frames.strides
    view = as_strided(frames, shape=(n, ho, wo, kh, kw, c),
                      strides=(s[0], sh * s[1], sw * s[2], s[1], s[2], s[3]), writeable=False)
    return np.ascontiguousarray(view).reshape(n * ho * wo, kh * kw * c)


def _col2im(dcols, out, kh, kw, sh, sw, ho, wo):
    """Scatter-add patch gradients back onto ``out`` (``(n, Hp, Wp, C)``, zeroed)."""
    n, _, _, c = out.shape
    dcols = dcols.reshape(n, ho, wo, kh, kw * c)
    s = out.strides
    # windows `groups` apart along width never overlap, so each group is one
    # vectorised add over contiguous (kw * c) runs
    groups = -(-kw // sw)
    for i in range(kh):
        for r in range(min(groups, wo)):
            m = len(range(r, wo, groups))
            base = out[:, i:, r * sw:, :]
            view = as_strided(base, shape=(n, ho, m, kw * c),
                              strides=(s[0], sh * s[1], groups * sw * s[2], s[3]))
            view += dcols[:, :, r::groups, i, :]
    return out


def _time_slice(a, st, to):
    return slice(a, a + st * (to - 1) + 1, st)


def _chunks(n, per_frame):
    step = max(1, _CHUNK_FLOATS // max(per_frame, 1))
    return [(c, min(n, c + step)) for c in range(0, n, step)]


def _conv_forward(x, w, stride, pads):
    kt, kh, kw, cin, cout = w.shape
    if x.shape[-1] != cin:
        raise ShapeError(f"channel axis: input has {x.shape[-1]} channels, kernel expects {cin}")
    xp = np.pad(x, ((0, 0), *pads, (0, 0)))
    b, tp, hp, wp, _ = xp.shape
    for axis, k, n in (("time", kt, tp), ("height", kh, hp), ("width", kw, wp)):
        if k > n:
            raise ShapeError(f"{axis} axis: kernel {k} exceeds padded input {n}")
    st, sh, sw = stride
    to, ho, wo = (tp - kt) // st + 1, (hp - kh) // sh + 1, (wp - kw) // sw + 1
    k = kh * kw * cin
    p = ho * wo
    # all time taps in one product: column block a holds tap a's response
    wcat = w.reshape(kt, k, cout).transpose(1, 0, 2).reshape(k, kt * cout)
    flat = xp.reshape(b * tp, hp, wp, cin)
    y = np.empty((b * tp, p, kt * cout), dtype=x.dtype)
    for c0, c1 in _chunks(b * tp, p * k):
        y[c0:c1] = (_im2col(flat[c0:c1], kh, kw, sh, sw, ho, wo) @ wcat).reshape(c1 - c0, p, kt * cout)
    y = y.reshape(b, tp, p, kt, cout)
    out = y[:, _time_slice(0, st, to), :, 0].copy()
    for a in range(1, kt):
        out += y[:, _time_slice(a, st, to), :, a]
    geom = (kt, kh, kw, st, sh, sw, to, ho, wo)
    return out.reshape(b, to, ho, wo, cout), xp, geom


def _conv_backward(g, xp, w, geom, pads, need_dx):
    kt, kh, kw, st, sh, sw, to, ho, wo = geom
    _, _, _, cin, cout = w.shape
    b, tp, hp, wp, _ = xp.shape
    k = kh * kw * cin
    p = ho * wo
    g2 = g.reshape(b, to, p, cout)
    # gcat[:, t'] block a = gradient of the output frame that read frame t' through tap a
    gcat = np.zeros((b, tp, p, kt, cout), dtype=g.dtype)
    for a in range(kt):
        gcat[:, _time_slice(a, st, to), :, a] = g2
    gcat = gcat.reshape(b * tp, p, kt * cout)
    wcat = w.reshape(kt, k, cout).transpose(1, 0, 2).reshape(k, kt * cout)
    flat = xp.reshape(b * tp, hp, wp, cin)
    dwcat = np.zeros((k, kt * cout), dtype=g.dtype)
    dxp = np.zeros_like(flat) if need_dx else None
    for c0, c1 in _chunks(b * tp, p * k):
        gc = gcat[c0:c1].reshape(-1, kt * cout)
        dwcat += _im2col(flat[c0:c1], kh, kw, sh, sw, ho, wo).T @ gc
        if need_dx:
            _col2im(gc @ wcat.T, dxp[c0:c1], kh, kw, sh, sw, ho, wo)
    dw = dwcat.reshape(k, kt, cout).transpose(1, 0, 2).reshape(w.shape)
    db = np.einsum("ij->j", g2.reshape(-1, cout))
    dx = None
    if need_dx:
        dxp = dxp.reshape(xp.shape)
        (t0, t1), (h0, h1), (w0, w1) = pads
        dx = dxp[:, t0:tp - t1, h0:hp - h1, w0:wp - w1, :]
    return dx, dw, db


def _as5d(x: Tensor):
    if x.ndim == 5:
        return x.data, False
    if x.ndim == 4:
        return x.data[None], True
    raise ShapeError(f"expected a (B,)T,H,W,C video tensor, got rank {x.ndim}")


def conv3d(x: Tensor, weight: Tensor, bias: Tensor, stride=1, pad=0) -> Tensor:
    """Spatiotemporal convolution; ``weight`` is ``(kt, kh, kw, cin, cout)``.

    ``pad`` may give a ``(lo, hi)`` pair per axis for asymmetric padding.
    """
    xd, squeeze = _as5d(x)
    stride = _triple(stride)
    pads = _pad_pairs(pad, 3)
    if weight.ndim != 5:
        raise ShapeError(f"kernel rank must be 5, got {weight.ndim}")
    out, xp, geom = _conv_forward(xd, weight.data, stride, pads)
    out = out + bias.data
    wdata = weight.data

    def backward(g):
        g5 = g[None] if squeeze else g
        dx, dw, db = _conv_backward(g5, xp, wdata, geom, pads, x.requires_grad)
        if dx is not None:
            x.accumulate(dx[0] if squeeze else dx)
        weight.accumulate(dw)
        bias.accumulate(db)

    return Tensor(out[0] if squeeze else out, _parents=(x, weight, bias), _backward=backward, _op="conv3d")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride=1, pad=0) -> Tensor:
    """Per-frame 2-D convolution; ``weight`` is ``(kh, kw, cin, cout)``.

    The kernel never spans time, so frames are folded into the batch axis.
    """
    xd, squeeze = _as5d(x)
    if weight.ndim != 4:
        raise ShapeError(f"kernel rank must be 4, got {weight.ndim}")
    sh, sw = (stride, stride) if np.isscalar(stride) else stride
    pads = [(0, 0)] + _pad_pairs(pad, 2)
    b, t = xd.shape[:2]
    folded = xd.reshape(b * t, 1, *xd.shape[2:])
    w5 = weight.data[None]
    out, xp, geom = _conv_forward(folded, w5, (1, sh, sw), pads)
    out = (out + bias.data).reshape(b, t, *out.shape[2:])

    def backward(g):
        g5 = g[None] if squeeze else g
        gf = g5.reshape(b * t, 1, *g5.shape[2:])
        dx, dw, db = _conv_backward(gf, xp, w5, geom, pads, x.requires_grad)
        if dx is not None:
            dx = dx.reshape(xd.shape)
            x.accumulate(dx[0] if squeeze else dx)
        weight.accumulate(dw[0])
        bias.accumulate(db)

    return Tensor(out[0] if squeeze else out, _parents=(x, weight, bias), _backward=backward, _op="conv2d")


# ---------------------------------------------------------------------------
# pooling / normalisation / activations


def maxpool3d(x: Tensor, window, stride=None) -> Tensor:
    """Max pooling without padding (floor semantics).

    Gradient goes to the first maximal element in (t, h, w) scan order.
    """
    xd, squeeze = _as5d(x)
    window = _triple(window)
    stride = window if stride is None else _triple(stride)
    _, t, h, w, _ = xd.shape
    for axis, k, n in (("time", window[0], t), ("height", window[1], h), ("width", window[2], w)):
        if k > n:
            raise ShapeError(f"{axis} axis: pooling window {k} exceeds input {n}")
    sizes = [(n - k) // s + 1 for n, k, s in zip((t, h, w), window, stride)]
    slices = []
    for a in range(window[0]):
        for i in range(window[1]):
            for j in range(window[2]):
                slices.append(tuple(
                    slice(o, o + s * (m - 1) + 1, s)
                    for o, s, m in zip((a, i, j), stride, sizes)
                ))
    best = None
    arg = None
    for k, sl in enumerate(slices):
        cand = xd[(slice(None), *sl, slice(None))]
        if best is None:
            best = cand.copy()
            arg = np.zeros(best.shape, dtype=np.int16)
        else:
            better = cand > best
            best[better] = cand[better]
            arg[better] = k

    def backward(g):
        g5 = g[None] if squeeze else g
        dx = np.zeros_like(xd)
        for k, sl in enumerate(slices):
            dx[(slice(None), *sl, slice(None))] += np.where(arg == k, g5, 0)
        x.accumulate(dx[0] if squeeze else dx)

    return Tensor(best[0] if squeeze else best, _parents=(x,), _backward=backward, _op="maxpool3d")


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
              running_var: np.ndarray, training: bool, momentum=BN_MOMENTUM, eps=BN_EPS) -> Tensor:
    """Channel-last batch normalisation, statistics pooled over every other axis.

    In training mode the running statistics are updated in place.
    """
    xd = x.data
    c = gamma.shape[0]
    if xd.shape[-1] != c:
        raise ShapeError(f"channel axis: input has {xd.shape[-1]} channels, parameters have {c}")
    x2 = xd.reshape(-1, c)
    m = x2.shape[0]
    # einsum reduces channel-last data far faster than sum(axis=...)
    if training:
        mean = np.einsum("ij->j", x2) / m
        xc = x2 - mean
        var = np.einsum("ij,ij->j", xc, xc) / m
        running_mean *= momentum
        running_mean += (1 - momentum) * mean
        running_var *= momentum
        running_var += (1 - momentum) * var * (m / max(m - 1, 1))
    else:
        mean = running_mean.astype(xd.dtype)
        var = running_var.astype(xd.dtype)
        xc = x2 - mean
    inv_std = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = xc
    xhat *= inv_std
    out = xhat * gamma.data + beta.data

    def backward(g):
        g2 = g.reshape(-1, c)
        sum_g = np.einsum("ij->j", g2)
        sum_gx = np.einsum("ij,ij->j", g2, xhat)
        gamma.accumulate(sum_gx)
        beta.accumulate(sum_g)
        if not x.requires_grad:
            return
        scale = gamma.data * inv_std
        if training:
            dx = (g2 - (sum_g + xhat * sum_gx) / m) * scale
        else:
            dx = g2 * scale
        x.accumulate(dx.reshape(xd.shape))

    return Tensor(out.reshape(xd.shape), _parents=(x, gamma, beta), _backward=backward, _op="batchnorm")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        x.accumulate(g * mask)

    return Tensor(x.data * mask, _parents=(x,), _backward=backward, _op="relu")


def reshape(x: Tensor, shape) -> Tensor:
    def backward(g):
        x.accumulate(g.reshape(x.shape))

    return Tensor(x.data.reshape(shape), _parents=(x,), _backward=backward, _op="reshape")


# ---------------------------------------------------------------------------
# recurrent


def _sigmoid(z):
    return 0.5 * (np.tanh(0.5 * z) + 1.0)


def _lstm_forward(x, wx, wh, b):
    bsz, t, _ = x.shape
    hdim = wh.shape[0]
    xw = x @ wx + b
    gates = np.empty((bsz, t, 4 * hdim), dtype=x.dtype)
    cs = np.empty((bsz, t, hdim), dtype=x.dtype)
    hs = np.empty((bsz, t, hdim), dtype=x.dtype)
    h = np.zeros((bsz, hdim), dtype=x.dtype)
    c = np.zeros((bsz, hdim), dtype=x.dtype)
    for step in range(t):
        z = xw[:, step] + h @ wh
        z[:, :2 * hdim] = _sigmoid(z[:, :2 * hdim])
        z[:, 2 * hdim:3 * hdim] = np.tanh(z[:, 2 * hdim:3 * hdim])
        z[:, 3 * hdim:] = _sigmoid(z[:, 3 * hdim:])
        i, f, gg, o = np.split(z, 4, axis=1)
        c = f * c + i * gg
        h = o * np.tanh(c)
        gates[:, step] = z
        cs[:, step] = c
        hs[:, step] = h
    return hs, (gates, cs, hs)


def _lstm_backward(gout, x, wx, wh, cache):
    gates, cs, hs = cache
    bsz, t, hdim = hs.shape
    dz_all = np.empty_like(gates)
    dh_next = np.zeros((bsz, hdim), dtype=x.dtype)
    dc_next = np.zeros((bsz, hdim), dtype=x.dtype)
    zero = np.zeros((bsz, hdim), dtype=x.dtype)
    for step in range(t - 1, -1, -1):
        i, f, gg, o = np.split(gates[:, step], 4, axis=1)
        c = cs[:, step]
        c_prev = cs[:, step - 1] if step > 0 else zero
        tc = np.tanh(c)
        dh = gout[:, step] + dh_next
        dc = dh * o * (1 - tc * tc) + dc_next
        dz = dz_all[:, step]
        dz[:, :hdim] = dc * gg * i * (1 - i)
        dz[:, hdim:2 * hdim] = dc * c_prev * f * (1 - f)
        dz[:, 2 * hdim:3 * hdim] = dc * i * (1 - gg * gg)
        dz[:, 3 * hdim:] = dh * tc * o * (1 - o)
        dc_next = dc * f
        dh_next = dz @ wh.T
    h_prev = np.concatenate([np.zeros((bsz, 1, hdim), dtype=x.dtype), hs[:, :-1]], axis=1)
    dzf = dz_all.reshape(-1, 4 * hdim)
    dwx = x.reshape(-1, x.shape[-1]).T @ dzf
    dwh = h_prev.reshape(-1, hdim).T @ dzf
    db = dzf.sum(axis=0)
    dx = dz_all @ wx.T
    return dx, dwx, dwh, db


def blstm(x: Tensor, fw: tuple, bw: tuple) -> Tensor:
    """Bidirectional LSTM layer; output is ``[forward, backward]`` concatenated.

    ``fw`` and ``bw`` are ``(wx, wh, b)`` with gate blocks ordered
    input, forget, cell, output.
    """
    xd = x.data
    squeeze = xd.ndim == 2
    if squeeze:
        xd = xd[None]
    if xd.ndim != 3:
        raise ShapeError(f"expected a (B,)T,D sequence, got rank {x.ndim}")
    for wx, wh, b in (fw, bw):
        if wx.shape[0] != xd.shape[-1]:
            raise ShapeError(f"feature axis: input has {xd.shape[-1]} dims, weights expect {wx.shape[0]}")
    h_fw, cache_fw = _lstm_forward(xd, fw[0].data, fw[1].data, fw[2].data)
    xr = xd[:, ::-1]
    h_bw, cache_bw = _lstm_forward(xr, bw[0].data, bw[1].data, bw[2].data)
    out = np.concatenate([h_fw, h_bw[:, ::-1]], axis=-1)
    hdim = h_fw.shape[-1]

    def backward(g):
        g3 = g[None] if squeeze else g
        dx_f, *dp_f = _lstm_backward(g3[..., :hdim], xd, fw[0].data, fw[1].data, cache_fw)
        dx_b, *dp_b = _lstm_backward(np.ascontiguousarray(g3[:, ::-1, hdim:]), xr, bw[0].data, bw[1].data, cache_bw)
        for p, d in zip(fw, dp_f):
            p.accumulate(d)
        for p, d in zip(bw, dp_b):
            p.accumulate(d)
        if x.requires_grad:
            dx = dx_f + dx_b[:, ::-1]
            x.accumulate(dx[0] if squeeze else dx)

    return Tensor(out[0] if squeeze else out, _parents=(x, *fw, *bw), _backward=backward, _op="blstm")


# ---------------------------------------------------------------------------
# output layer


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"feature axis: input has {x.shape[-1]} dims, weight expects {weight.shape[0]}")
    xd = x.data

    def backward(g):
        weight.accumulate(xd.reshape(-1, xd.shape[-1]).T @ g.reshape(-1, g.shape[-1]))
        bias.accumulate(g.reshape(-1, g.shape[-1]).sum(axis=0))
        x.accumulate(g @ weight.data.T)

    return Tensor(xd @ weight.data + bias.data, _parents=(x, weight, bias), _backward=backward, _op="linear")


def log_softmax(x: Tensor) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def backward(g):
        x.accumulate(g - np.exp(out) * g.sum(axis=-1, keepdims=True))

    return Tensor(out, _parents=(x,), _backward=backward, _op="log_softmax")


def softmax(x: Tensor) -> Tensor:
    xd = x.data
    e = np.exp(xd - xd.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        x.accumulate(out * (g - (g * out).sum(axis=-1, keepdims=True)))

    return Tensor(out, _parents=(x,), _backward=backward, _op="softmax")


def linear_softmax(x: Tensor, weight: Tensor, bias: Tensor, log=False) -> Tensor:
    """Affine projection to label scores followed by (log-)softmax."""
    z = linear(x, weight, bias)
    return log_softmax(z) if log else softmax(z)


# ---------------------------------------------------------------------------
# initialisation


def glorot_uniform(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(get_dtype())


def lstm_init(rng, in_dim, hidden):
    limit = 1.0 / np.sqrt(hidden)
    wx = rng.uniform(-limit, limit, size=(in_dim, 4 * hidden))
    wh = rng.uniform(-limit, limit, size=(hidden, 4 * hidden))
    b = np.zeros(4 * hidden)
    b[hidden:2 * hidden] = 1.0  # forget gate
    dt = get_dtype()
    return wx.astype(dt), wh.astype(dt), b.astype(dt)
