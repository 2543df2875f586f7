"""Layer set with hand-written forward/backward passes.

Every layer caches what its backward needs only while the module is in
training mode. Activations are NCHW; one-dimensional layers run as 2D layers
with a unit-height image and ``(1, k)`` kernels.
"""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Parameter:
    __slots__ = ("data", "grad")

    def __init__(self, data: np.ndarray):
        self.data = data
        self.grad = np.zeros_like(data)

    @property
    def shape(self):
        return self.data.shape


class Module:
    """Base class: tracks child modules, parameters and buffers in attribute order."""

    def __init__(self):
        object.__setattr__(self, "_modules", OrderedDict())
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "training", True)
        object.__setattr__(self, "_cache", None)

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._modules[name] = value
        elif isinstance(value, Parameter):
            self._params[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray):
        self._buffers[name] = name
        object.__setattr__(self, name, value)

    # -- traversal ---------------------------------------------------------
    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, mod in self._modules.items():
            yield from mod.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for mname, mod in self.named_modules(prefix):
            for pname, p in mod._params.items():
                yield (f"{mname}.{pname}" if mname else pname), p

    def parameters(self) -> dict[str, Parameter]:
        return OrderedDict(self.named_parameters())

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for mname, mod in self.named_modules(prefix):
            for bname in mod._buffers:
                yield (f"{mname}.{bname}" if mname else bname), getattr(mod, bname)

    def leaves(self) -> list["Module"]:
        return [m for _, m in self.named_modules() if not m._modules]

    def state_dict(self) -> dict[str, np.ndarray]:
        state = OrderedDict((n, p.data) for n, p in self.named_parameters())
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]):
        known = set(self.state_dict())
        extra = sorted(k for k in state if k not in known)
        if extra:
            raise KeyError(f"unexpected keys {extra[:5]!r}")
        for name, p in self.named_parameters():
            if name not in state:
                raise KeyError(f"missing parameter {name!r}")
            if state[name].shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: {state[name].shape} vs {p.data.shape}")
            p.data = np.array(state[name], dtype=p.data.dtype)
            p.grad = np.zeros_like(p.data)
        for mname, mod in self.named_modules():
            for bname in mod._buffers:
                full = f"{mname}.{bname}" if mname else bname
                if full not in state:
                    raise KeyError(f"missing buffer {full!r}")
                cur = getattr(mod, bname)
                object.__setattr__(mod, bname, np.array(state[full], dtype=cur.dtype))

    def train(self, mode: bool = True) -> "Module":
        for _, m in self.named_modules():
            object.__setattr__(m, "training", mode)
            if not mode:
                object.__setattr__(m, "_cache", None)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self):
        for _, p in self.named_parameters():
            p.grad = np.zeros_like(p.data)

    def astype(self, dtype) -> "Module":
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
            p.grad = np.zeros_like(p.data)
        for _, mod in self.named_modules():
            for bname in mod._buffers:
                object.__setattr__(mod, bname, getattr(mod, bname).astype(dtype))
        return self

    def param_count(self) -> int:
        return int(sum(p.data.size for _, p in self.named_parameters()))

    def _need_cache(self):
        if self._cache is None:
            raise RuntimeError(f"{type(self).__name__}.backward called without a training-mode forward")
        return self._cache

    def macs(self) -> int:
        return 0

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _pair(k) -> tuple[int, int]:
    return (k, k) if isinstance(k, int) else tuple(k)


class Conv2d(Module):
    """Stride-1 convolution with 'same' zero padding (odd kernels).

    ``input_grad=False`` skips the input gradient (used for network stems).
    """

    def __init__(self, cin: int, cout: int, kernel, rng: np.random.Generator, bias: bool = True,
                 input_grad: bool = True):
        super().__init__()
        self.kernel = _pair(kernel)
        kh, kw = self.kernel
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError("Conv2d supports odd kernel sizes only")
        self.cin, self.cout = cin, cout
        self.input_grad = input_grad
        self.weight = Parameter(kaiming_uniform(rng, (cout, cin, kh, kw), cin * kh * kw))
        self.bias = Parameter(np.zeros(cout, np.float32)) if bias else None
        self._out_shape = None

    def _wmat(self):
        # columns are ordered (kh, kw, cin)
        return self.weight.data.transpose(0, 2, 3, 1).reshape(self.cout, -1)

    def forward(self, x):
        N, C, H, W = x.shape
        if C != self.cin:
            raise ValueError(f"Conv2d expected {self.cin} input channels, got {C}")
        kh, kw = self.kernel
        xh = x.transpose(0, 2, 3, 1)
        if kh == 1 and kw == 1:
            cols = xh.reshape(-1, C)
        else:
            ph, pw = kh // 2, kw // 2
            xp = np.zeros((N, H + 2 * ph, W + 2 * pw, C), dtype=x.dtype)
            xp[:, ph:ph + H, pw:pw + W, :] = xh
            win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # N H W C kh kw
            cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(N * H * W, kh * kw * C)
        y = cols @ self._wmat().T
        if self.bias is not None:
            y += self.bias.data
        self._out_shape = (N, self.cout, H, W)
        if self.training:
            self._cache = (cols, x.shape)
        return y.reshape(N, H, W, self.cout).transpose(0, 3, 1, 2)

    def backward(self, dy):
        cols, xshape = self._need_cache()
        N, C, H, W = xshape
        kh, kw = self.kernel
        dyt = dy.transpose(0, 2, 3, 1).reshape(-1, self.cout)
        gw = (dyt.T @ cols).reshape(self.cout, kh, kw, C).transpose(0, 3, 1, 2)
        self.weight.grad += gw
        if self.bias is not None:
            self.bias.grad += dyt.sum(axis=0)
        if not self.input_grad:
            return None
        dcols = dyt @ self._wmat()
        if kh == 1 and kw == 1:
            return dcols.reshape(N, H, W, C).transpose(0, 3, 1, 2)
        dcols = dcols.reshape(N, H, W, kh, kw, C)
        ph, pw = kh // 2, kw // 2
        dxp = np.zeros((N, H + 2 * ph, W + 2 * pw, C), dtype=dy.dtype)
        for a in range(kh):
            for b in range(kw):
                dxp[:, a:a + H, b:b + W, :] += dcols[:, :, :, a, b, :]
        return dxp[:, ph:ph + H, pw:pw + W, :].transpose(0, 3, 1, 2)

    def macs(self) -> int:
        if self._out_shape is None:
            return 0
        n, c, h, w = self._out_shape
        return n * c * h * w * self.cin * self.kernel[0] * self.kernel[1]


class ConvTranspose2d(Module):
    """Deconvolution whose stride equals its kernel (non-overlapping upsampling)."""

    def __init__(self, cin: int, cout: int, kernel, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.kernel = _pair(kernel)
        kh, kw = self.kernel
        self.cin, self.cout = cin, cout
        # one draw shared by every kernel tap: starts as nearest upsampling, so
        # the output carries no stride-periodic (checkerboard) pattern at init
        w = kaiming_uniform(rng, (cin, cout, 1, 1), cin)
        self.weight = Parameter(np.ascontiguousarray(np.broadcast_to(w, (cin, cout, kh, kw))))
        self.bias = Parameter(np.zeros(cout, np.float32)) if bias else None
        self._in_shape = None

    def forward(self, x):
        N, C, H, W = x.shape
        kh, kw = self.kernel
        xt = x.transpose(0, 2, 3, 1).reshape(-1, C)
        y = xt @ self.weight.data.reshape(C, -1)
        y = y.reshape(N, H, W, self.cout, kh, kw).transpose(0, 3, 1, 4, 2, 5)
        y = y.reshape(N, self.cout, H * kh, W * kw)
        if self.bias is not None:
            y = y + self.bias.data[None, :, None, None]
        self._in_shape = x.shape
        if self.training:
            self._cache = (xt, x.shape)
        return y

    def backward(self, dy):
        xt, (N, C, H, W) = self._need_cache()
        kh, kw = self.kernel
        if self.bias is not None:
            self.bias.grad += dy.sum(axis=(0, 2, 3))
        d = dy.reshape(N, self.cout, H, kh, W, kw).transpose(0, 2, 4, 1, 3, 5).reshape(N * H * W, -1)
        self.weight.grad += (xt.T @ d).reshape(self.weight.data.shape)
        dx = d @ self.weight.data.reshape(C, -1).T
        return dx.reshape(N, H, W, C).transpose(0, 3, 1, 2)

    def macs(self) -> int:
        if self._in_shape is None:
            return 0
        n, c, h, w = self._in_shape
        return n * c * h * w * self.cout * self.kernel[0] * self.kernel[1]


class BatchNorm(Module):
    """Per-channel batch norm; batch statistics in training, running averages in eval."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.gamma = Parameter(np.ones(channels, np.float32))
        self.beta = Parameter(np.zeros(channels, np.float32))
        self.register_buffer("running_mean", np.zeros(channels, np.float32))
        self.register_buffer("running_var", np.ones(channels, np.float32))

    def forward(self, x):
        shape = (1, -1, 1, 1)
        if self.training:
            axes = (0, 2, 3)
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = x.size // x.shape[1]
            unbiased = var * m / max(m - 1, 1)
            object.__setattr__(self, "running_mean",
                               ((1 - self.momentum) * self.running_mean + self.momentum * mean).astype(x.dtype))
            object.__setattr__(self, "running_var",
                               ((1 - self.momentum) * self.running_var + self.momentum * unbiased).astype(x.dtype))
            inv = 1.0 / np.sqrt(var + self.eps)
            xhat = (x - mean.reshape(shape)) * inv.reshape(shape)
            self._cache = (xhat, inv)
        else:
            inv = 1.0 / np.sqrt(self.running_var + self.eps)
            xhat = (x - self.running_mean.reshape(shape)) * inv.reshape(shape)
        return xhat * self.gamma.data.reshape(shape) + self.beta.data.reshape(shape)

    def backward(self, dy):
        xhat, inv = self._need_cache()
        shape = (1, -1, 1, 1)
        axes = (0, 2, 3)
        self.gamma.grad += (dy * xhat).sum(axis=axes)
        self.beta.grad += dy.sum(axis=axes)
        dxhat = dy * self.gamma.data.reshape(shape)
        return inv.reshape(shape) * (dxhat - dxhat.mean(axis=axes).reshape(shape)
                                     - xhat * (dxhat * xhat).mean(axis=axes).reshape(shape))


class ReLU(Module):
    def forward(self, x):
        mask = x > 0
        if self.training:
            self._cache = mask
        return x * mask

    def backward(self, dy):
        return dy * self._need_cache()


class Sigmoid(Module):
    def forward(self, x):
        y = 0.5 * (1.0 + np.tanh(0.5 * x))
        if self.training:
            self._cache = y
        return y

    def backward(self, dy):
        y = self._need_cache()
        return dy * y * (1.0 - y)


class MaxPool2d(Module):
    """Non-overlapping max pooling, ceil mode (partial windows at the border)."""

    def __init__(self, kernel=2):
        super().__init__()
        self.kernel = _pair(kernel)

    def forward(self, x):
        N, C, H, W = x.shape
        kh, kw = self.kernel
        Ho, Wo = -(-H // kh), -(-W // kw)
        if Ho * kh != H or Wo * kw != W:
            xp = np.full((N, C, Ho * kh, Wo * kw), -np.inf, dtype=x.dtype)
            xp[:, :, :H, :W] = x
        else:
            xp = x
        win = xp.reshape(N, C, Ho, kh, Wo, kw).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, Ho, Wo, kh * kw)
        idx = win.argmax(axis=-1)
        y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        if self.training:
            self._cache = (idx, x.shape)
        return y

    def backward(self, dy):
        idx, (N, C, H, W) = self._need_cache()
        kh, kw = self.kernel
        Ho, Wo = idx.shape[2:]
        dwin = np.zeros((N, C, Ho, Wo, kh * kw), dtype=dy.dtype)
        np.put_along_axis(dwin, idx[..., None], dy[..., None], axis=-1)
        dxp = dwin.reshape(N, C, Ho, Wo, kh, kw).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, Ho * kh, Wo * kw)
        return dxp[:, :, :H, :W]


class Linear(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator, zero_init: bool = False):
        super().__init__()
        self.cin, self.cout = cin, cout
        w = np.zeros((cout, cin), np.float32) if zero_init else kaiming_uniform(rng, (cout, cin), cin)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(cout, np.float32))
        self._n = None

    def forward(self, x):
        self._n = x.shape[0]
        if self.training:
            self._cache = x
        return x @ self.weight.data.T + self.bias.data

    def backward(self, dy):
        x = self._need_cache()
        self.weight.grad += dy.T @ x
        self.bias.grad += dy.sum(axis=0)
        return dy @ self.weight.data

    def macs(self) -> int:
        return 0 if self._n is None else self._n * self.cin * self.cout


class GlobalAvgPool(Module):
    def forward(self, x):
        if self.training:
            self._cache = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, dy):
        shape = self._need_cache()
        n = shape[2] * shape[3]
        return np.broadcast_to((dy / n)[:, :, None, None], shape).copy()


class SpatialSoftmax(Module):
    """Softmax over the spatial positions of every (sample, channel) map, logits scaled by ``beta``."""

    def __init__(self, beta: float = 1.0):
        super().__init__()
        self.beta = float(beta)

    def forward(self, x):
        N, C = x.shape[:2]
        z = self.beta * x.reshape(N, C, -1)
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=-1, keepdims=True)
        if self.training:
            self._cache = (p, x.shape)
        return p.reshape(x.shape)

    def backward(self, dy):
        p, shape = self._need_cache()
        N, C = shape[:2]
        g = dy.reshape(N, C, -1)
        dz = p * (g - (g * p).sum(axis=-1, keepdims=True))
        return (self.beta * dz).reshape(shape)


class Sequential(Module):
    def __init__(self, *layers: Module):
        super().__init__()
        for i, layer in enumerate(layers):
            setattr(self, str(i), layer)

    def forward(self, x):
        for layer in self._modules.values():
            x = layer(x)
        return x

    def backward(self, dy):
        for layer in reversed(self._modules.values()):
            dy = layer.backward(dy)
            if dy is None:
                return None
        return dy


def conv_block(cin: int, cout: int, kernel, rng: np.random.Generator, input_grad: bool = True) -> Sequential:
    """Convolution, batch-norm, ReLU."""
    return Sequential(Conv2d(cin, cout, kernel, rng, bias=False, input_grad=input_grad),
                      BatchNorm(cout), ReLU())


class ResidualBlock(Module):
    """Two conv blocks with an identity (or 1x1 projection) skip connection."""

    def __init__(self, cin: int, cout: int, kernel, rng: np.random.Generator):
        super().__init__()
        self.body = Sequential(conv_block(cin, cout, kernel, rng), conv_block(cout, cout, kernel, rng))
        self.skip = None if cin == cout else Sequential(Conv2d(cin, cout, 1, rng, bias=False), BatchNorm(cout))

    def forward(self, x):
        s = x if self.skip is None else self.skip(x)
        return self.body(x) + s

    def backward(self, dy):
        dx = self.body.backward(dy)
        return dx + (dy if self.skip is None else self.skip.backward(dy))
