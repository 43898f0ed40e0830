"""Dense n-d layers with exact reverse-mode gradients.

Channel-last layout throughout; convolutions are stride-1 with same padding.
A layer caches what its backward pass needs during forward; models are
confined to one thread while training.
"""

from __future__ import annotations

import logging

import numpy as np
from numpy.lib.stride_tricks import as_strided

from ..errors import ConfigError, ShapeError

log = logging.getLogger("asckit.engine")

# keep per-chunk im2col buffers around this many elements
_COL_BUDGET = 24_000_000


class Param:
    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)


class Layer:
    name = "layer"

    def params(self) -> list[Param]:
        return []

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dout: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def out_shape(self, shape: tuple) -> tuple:
        return shape


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


class Conv2D(Layer):
    """Same-padded stride-1 cross-correlation, im2col + matmul."""

    def __init__(self, kh: int, kw: int, c_in: int, c_out: int,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        self.kh, self.kw, self.c_in, self.c_out = kh, kw, c_in, c_out
        rng = rng or np.random.default_rng(0)
        fan_in = kh * kw * c_in
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(kh, kw, c_in, c_out))
        self.w = Param("W", w.astype(dtype))
        self.b = Param("b", np.zeros(c_out, dtype=dtype))
        # TF-style SAME padding (even kernels pad one more at the end)
        self.pt = (kh - 1) // 2
        self.pl = (kw - 1) // 2
        self.pb = kh - 1 - self.pt
        self.pr = kw - 1 - self.pl
        self.name = f"conv{kh}x{kw}"

    def params(self):
        return [self.w, self.b]

    def _pad(self, x):
        return np.pad(x, ((0, 0), (self.pt, self.pb), (self.pl, self.pr), (0, 0)))

    def _cols(self, xp, h, w):
        b = xp.shape[0]
        s0, s1, s2, s3 = xp.strides
        view = as_strided(xp, (b, h, w, self.kh, self.kw, self.c_in),
                          (s0, s1, s2, s1, s2, s3))
        return view.reshape(b * h * w, self.kh * self.kw * self.c_in)

    def _chunk(self, b, h, w):
        per_sample = h * w * self.kh * self.kw * self.c_in
        return max(1, min(b, _COL_BUDGET // max(per_sample, 1)))

    def forward(self, x, train=False):
        if x.ndim != 4 or x.shape[3] != self.c_in:
            raise ShapeError(f"conv expects (B,H,W,{self.c_in}), got {x.shape}")
        b, h, w, _ = x.shape
        self._x = x
        wm = self.w.value.reshape(-1, self.c_out)
        y = np.empty((b, h, w, self.c_out), dtype=x.dtype)
        step = self._chunk(b, h, w)
        for i in range(0, b, step):
            xp = self._pad(x[i:i + step])
            cols = self._cols(xp, h, w)
            y[i:i + step] = (cols @ wm + self.b.value).reshape(-1, h, w, self.c_out)
        return y

    def backward(self, dout):
        x = self._x
        b, h, w, _ = x.shape
        wm = self.w.value.reshape(-1, self.c_out)
        dwm = np.zeros_like(wm)
        step = self._chunk(b, h, w)
        for i in range(0, b, step):
            xp = self._pad(x[i:i + step])
            cols = self._cols(xp, h, w)
            dflat = dout[i:i + step].reshape(-1, self.c_out)
            dwm += cols.T @ dflat
        self.w.grad += dwm.reshape(self.w.value.shape)
        self.b.grad += dout.sum(axis=(0, 1, 2))

        # dx: one matmul back to column space, then scatter-add each kernel
        # tap into the padded gradient (cheaper than im2col over dout, whose
        # traffic scales with c_out instead of c_in)
        dx = np.empty_like(x)
        hp, wp = h + self.pt + self.pb, w + self.pl + self.pr
        for i in range(0, b, step):
            nb = min(step, b - i)
            dflat = dout[i:i + nb].reshape(-1, self.c_out)
            dcols = (dflat @ wm.T).reshape(nb, h, w, self.kh, self.kw,
                                           self.c_in)
            dxp = np.zeros((nb, hp, wp, self.c_in), dtype=x.dtype)
            for ky in range(self.kh):
                for kx in range(self.kw):
                    dxp[:, ky:ky + h, kx:kx + w] += dcols[:, :, :, ky, kx]
            dx[i:i + nb] = dxp[:, self.pt:self.pt + h, self.pl:self.pl + w]
        self._x = None
        return dx

    def out_shape(self, shape):
        h, w, c = shape
        if c != self.c_in:
            raise ShapeError(f"conv expects {self.c_in} channels, got {c}")
        return (h, w, self.c_out)


class BatchNorm(Layer):
    """Per-channel normalization over batch (+ spatial) axes, channel last."""

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.9,
                 dtype=np.float32):
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.scale = Param("scale", np.ones(channels, dtype=dtype))
        self.shift = Param("shift", np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.updated = False
        self.name = "batchnorm"

    def params(self):
        return [self.scale, self.shift]

    def forward(self, x, train=False):
        if x.shape[-1] != self.channels:
            raise ShapeError(f"batchnorm expects {self.channels} channels")
        axes = tuple(range(x.ndim - 1))
        if train:
            mean = x.mean(axis=axes)
            xc = x - mean
            var = np.mean(xc * xc, axis=axes)
            m = self.momentum
            self.running_mean = (m * self.running_mean + (1 - m) * mean).astype(
                self.running_mean.dtype)
            self.running_var = (m * self.running_var + (1 - m) * var).astype(
                self.running_var.dtype)
            self.updated = True
            inv = (1.0 / np.sqrt(var + self.eps)).astype(x.dtype)
            xc *= inv  # xc is now xhat
            self._cache = (xc, inv, axes)
            y = xc * self.scale.value
            y += self.shift.value
            return y
        if not self.updated:
            log.warning("batchnorm eval before any train step: using init stats")
        inv = 1.0 / np.sqrt(self.running_var + self.eps)
        y = (x - self.running_mean) * (self.scale.value * inv).astype(x.dtype)
        y += self.shift.value
        return y.astype(x.dtype, copy=False)

    def backward(self, dout):
        xhat, inv, axes = self._cache
        m = dout.size // self.channels
        self.shift.grad += dout.sum(axis=axes)
        self.scale.grad += (dout * xhat).sum(axis=axes)
        dxhat = dout * self.scale.value
        sum_d = dxhat.sum(axis=axes) / m
        sum_dx = (dxhat * xhat).sum(axis=axes) / m
        dx = dxhat
        dx -= sum_d
        dx -= xhat * sum_dx
        dx *= inv
        self._cache = None
        return dx.astype(dout.dtype, copy=False)


class ReLU(Layer):
    name = "relu"

    def forward(self, x, train=False):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dout):
        dx = dout * self._mask
        self._mask = None
        return dx


class Dropout(Layer):
    """Inverted dropout: survivors scaled by 1/(1-rate); identity in eval."""

    def __init__(self, rate: float):
        if not 0.0 <= rate < 1.0:
            raise ConfigError(f"dropout rate {rate} not in [0, 1)")
        self.rate = rate
        self.rng = np.random.default_rng(0)
        self.name = f"dropout{int(rate * 100)}"

    def forward(self, x, train=False):
        if not train or self.rate == 0.0:
            self._mask = None
            return x
        keep = 1.0 - self.rate
        u = self.rng.random(x.shape, dtype=np.float32)
        self._mask = (u >= self.rate).astype(x.dtype)
        self._mask /= keep
        return x * self._mask

    def backward(self, dout):
        if self._mask is None:
            return dout
        dx = dout * self._mask
        self._mask = None
        return dx


class AvgPool2D(Layer):
    def __init__(self, ph: int, pw: int):
        self.ph, self.pw = ph, pw
        self.name = f"avgpool{ph}x{pw}"

    def forward(self, x, train=False):
        b, h, w, c = x.shape
        if h % self.ph or w % self.pw:
            raise ShapeError(f"{h}x{w} not divisible by pool {self.ph}x{self.pw}")
        self._in_shape = x.shape
        return x.reshape(b, h // self.ph, self.ph, w // self.pw, self.pw, c).mean(
            axis=(2, 4))

    def backward(self, dout):
        b, h, w, c = self._in_shape
        d = dout / (self.ph * self.pw)
        d = np.broadcast_to(
            d[:, :, None, :, None, :],
            (b, h // self.ph, self.ph, w // self.pw, self.pw, c),
        )
        return d.reshape(b, h, w, c).astype(dout.dtype, copy=False)

    def out_shape(self, shape):
        h, w, c = shape
        if h % self.ph or w % self.pw:
            raise ShapeError(f"{h}x{w} not divisible by pool {self.ph}x{self.pw}")
        return (h // self.ph, w // self.pw, c)


class GlobalAvgPool(Layer):
    name = "gap"

    def forward(self, x, train=False):
        self._in_shape = x.shape
        return x.mean(axis=(1, 2))

    def backward(self, dout):
        b, h, w, c = self._in_shape
        return np.broadcast_to(
            dout[:, None, None, :] / (h * w), (b, h, w, c)
        ).astype(dout.dtype, copy=False)

    def out_shape(self, shape):
        return (shape[2],)


class Dense(Layer):
    def __init__(self, n_in: int, n_out: int,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        w = rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_in, n_out))
        self.w = Param("W", w.astype(dtype))
        self.b = Param("b", np.zeros(n_out, dtype=dtype))
        self.name = f"dense{n_out}"

    def params(self):
        return [self.w, self.b]

    def forward(self, x, train=False):
        if x.shape[1] != self.w.value.shape[0]:
            raise ShapeError(
                f"dense expects {self.w.value.shape[0]} inputs, got {x.shape[1]}")
        self._x = x
        return x @ self.w.value + self.b.value

    def backward(self, dout):
        self.w.grad += self._x.T @ dout
        self.b.grad += dout.sum(axis=0)
        dx = dout @ self.w.value.T
        self._x = None
        return dx

    def out_shape(self, shape):
        return (self.w.value.shape[1],)


class Softmax(Layer):
    name = "softmax"

    def forward(self, x, train=False):
        z = x - x.max(axis=1, keepdims=True)
        e = np.exp(z)
        self._y = e / e.sum(axis=1, keepdims=True)
        return self._y

    def backward(self, dout):
        y = self._y
        dx = y * (dout - (dout * y).sum(axis=1, keepdims=True))
        self._y = None
        return dx


class Reshape(Layer):
    def __init__(self, out_shape: tuple):
        self._out = out_shape
        self.name = "reshape"

    def forward(self, x, train=False):
        self._in_shape = x.shape
        return x.reshape((x.shape[0],) + self._out)

    def backward(self, dout):
        return dout.reshape(self._in_shape)

    def out_shape(self, shape):
        if int(np.prod(shape)) != int(np.prod(self._out)):
            raise ShapeError(f"cannot reshape {shape} to {self._out}")
        return self._out


class TimeFeatureMean(Layer):
    """(B, T, F) -> (B, T): mean over the feature axis of each time frame."""

    name = "time_feature_mean"

    def forward(self, x, train=False):
        self._in_shape = x.shape
        return x.mean(axis=2)

    def backward(self, dout):
        b, t, f = self._in_shape
        return np.broadcast_to(dout[:, :, None] / f,
                               (b, t, f)).astype(dout.dtype, copy=False)

    def out_shape(self, shape):
        return (shape[0],)


class Concat(Layer):
    """Concatenate branch outputs along the feature axis."""

    name = "concat"

    def forward_many(self, xs: list[np.ndarray]) -> np.ndarray:
        self._widths = [x.shape[1] for x in xs]
        return np.concatenate(xs, axis=1)

    def backward_many(self, dout: np.ndarray) -> list[np.ndarray]:
        out = []
        pos = 0
        for w in self._widths:
            out.append(dout[:, pos:pos + w])
            pos += w
        return out

    def forward(self, x, train=False):
        return x

    def backward(self, dout):
        return dout


class BiGRU(Layer):
    """Bidirectional GRU over (B, T, D) with per-step concat and output dropout.

    Gate order: update z, reset r, candidate h~ (sigmoid, sigmoid, tanh);
    h_t = (1 - z) * h_{t-1} + z * h~. Independent parameters per direction,
    full backpropagation through time.
    """

    def __init__(self, n_in: int, hidden: int, dropout: float = 0.3,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        self.n_in, self.hidden = n_in, hidden
        self.dropout = Dropout(dropout)
        self._params = []
        for d in ("fw", "bw"):
            wx = rng.normal(0.0, np.sqrt(1.0 / n_in), size=(n_in, 3 * hidden))
            wh = rng.normal(0.0, np.sqrt(1.0 / hidden), size=(hidden, 3 * hidden))
            setattr(self, f"wx_{d}", Param(f"Wx_{d}", wx.astype(dtype)))
            setattr(self, f"wh_{d}", Param(f"Wh_{d}", wh.astype(dtype)))
            setattr(self, f"b_{d}", Param(f"b_{d}", np.zeros(3 * hidden, dtype=dtype)))
            self._params += [getattr(self, f"wx_{d}"), getattr(self, f"wh_{d}"),
                             getattr(self, f"b_{d}")]
        self.name = f"bigru{hidden}"

    @property
    def rng(self):
        return self.dropout.rng

    @rng.setter
    def rng(self, value):
        self.dropout.rng = value

    def params(self):
        return self._params

    def _run(self, x, wx, wh, b):
        """Forward one direction; returns outputs and the BPTT cache."""
        bsz, t, _ = x.shape
        hdim = self.hidden
        pre = x @ wx.value + b.value  # (B, T, 3H)
        h = np.zeros((bsz, hdim), dtype=x.dtype)
        hs = np.empty((t, bsz, hdim), dtype=x.dtype)
        zs = np.empty_like(hs)
        rs = np.empty_like(hs)
        cs = np.empty_like(hs)
        hprev = np.empty_like(hs)
        uz, ur, uc = (wh.value[:, :hdim], wh.value[:, hdim:2 * hdim],
                      wh.value[:, 2 * hdim:])
        for step in range(t):
            p = pre[:, step]
            z = _sigmoid(p[:, :hdim] + h @ uz)
            r = _sigmoid(p[:, hdim:2 * hdim] + h @ ur)
            c = np.tanh(p[:, 2 * hdim:] + (r * h) @ uc)
            hprev[step] = h
            h = (1.0 - z) * h + z * c
            hs[step], zs[step], rs[step], cs[step] = h, z, r, c
        return hs, (x, zs, rs, cs, hprev)

    def _run_back(self, dhs, cache, wx, wh, b):
        """BPTT one direction; dhs is (T, B, H) grad on that direction's output."""
        x, zs, rs, cs, hprev = cache
        bsz, t, _ = x.shape
        hdim = self.hidden
        uz, ur, uc = (wh.value[:, :hdim], wh.value[:, hdim:2 * hdim],
                      wh.value[:, 2 * hdim:])
        dpre = np.empty((t, bsz, 3 * hdim), dtype=x.dtype)
        dwh = np.zeros_like(wh.value)
        dh = np.zeros((bsz, hdim), dtype=x.dtype)
        for step in range(t - 1, -1, -1):
            dh = dh + dhs[step]
            z, r, c, hp = zs[step], rs[step], cs[step], hprev[step]
            dz = dh * (c - hp)
            dc = dh * z
            da_z = dz * z * (1.0 - z)
            da_c = dc * (1.0 - c * c)
            dr = (da_c @ uc.T) * hp
            da_r = dr * r * (1.0 - r)
            dh = (dh * (1.0 - z) + da_z @ uz.T + da_r @ ur.T
                  + (da_c @ uc.T) * r)
            dwh[:, :hdim] += hp.T @ da_z
            dwh[:, hdim:2 * hdim] += hp.T @ da_r
            dwh[:, 2 * hdim:] += (r * hp).T @ da_c
            dpre[step, :, :hdim] = da_z
            dpre[step, :, hdim:2 * hdim] = da_r
            dpre[step, :, 2 * hdim:] = da_c
        dpre_bt = np.ascontiguousarray(dpre.transpose(1, 0, 2))  # (B, T, 3H)
        wx.grad += x.reshape(-1, self.n_in).T @ dpre_bt.reshape(-1, 3 * hdim)
        wh.grad += dwh
        b.grad += dpre_bt.sum(axis=(0, 1))
        return dpre_bt @ wx.value.T

    def forward(self, x, train=False):
        if x.ndim != 3 or x.shape[2] != self.n_in:
            raise ShapeError(f"bigru expects (B,T,{self.n_in}), got {x.shape}")
        hs_f, self._cache_f = self._run(x, self.wx_fw, self.wh_fw, self.b_fw)
        xr = x[:, ::-1]
        hs_b, self._cache_b = self._run(xr, self.wx_bw, self.wh_bw, self.b_bw)
        # forward outputs in time order; backward outputs re-reversed
        y = np.concatenate(
            [hs_f.transpose(1, 0, 2), hs_b[::-1].transpose(1, 0, 2)], axis=2)
        return self.dropout.forward(y, train)

    def backward(self, dout):
        dout = self.dropout.backward(dout)
        hdim = self.hidden
        dhs_f = dout[:, :, :hdim].transpose(1, 0, 2)
        dhs_b = dout[:, :, hdim:].transpose(1, 0, 2)[::-1]
        dx_f = self._run_back(dhs_f, self._cache_f, self.wx_fw, self.wh_fw,
                              self.b_fw)
        dx_b = self._run_back(dhs_b, self._cache_b, self.wx_bw, self.wh_bw,
                              self.b_bw)
        self._cache_f = self._cache_b = None
        return dx_f + dx_b[:, ::-1]

    def out_shape(self, shape):
        t, d = shape
        if d != self.n_in:
            raise ShapeError(f"bigru expects {self.n_in} features, got {d}")
        return (t, 2 * self.hidden)


class Sequential(Layer):
    def __init__(self, layers: list[Layer], name: str = "seq"):
        self.layers = layers
        self.name = name

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout

    def out_shape(self, shape):
        for layer in self.layers:
            shape = layer.out_shape(shape)
        return shape

    def shape_trace(self, shape):
        trace = []
        for layer in self.layers:
            shape = layer.out_shape(shape)
            trace.append(shape)
        return trace
