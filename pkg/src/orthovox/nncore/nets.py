"""The three network families: 2D detection backbone with three heads, its 1D
twin for column heights, and the joint-plane estimator plus confidence head.
"""

from __future__ import annotations

import numpy as np

from .layers import (BatchNorm, Conv2d, ConvTranspose2d, GlobalAvgPool, Linear, MaxPool2d,
                     Module, ReLU, ResidualBlock, Sequential, Sigmoid, SpatialSoftmax, conv_block)


def _k(k: int, dims: int):
    return (k, k) if dims == 2 else (1, k)


class EncoderDecoder(Module):
    """7x7 stem, three pooled residual stages, symmetric decoder (deconvolution,
    additive skip, residual block), then a 1x1 output convolution.

    Works on 2D maps (``dims=2``) or on 1D signals stored as unit-height maps
    (``dims=1``). Output spatial size always equals the input size; odd sizes
    are handled by ceil-mode pooling and cropping after upsampling.
    """

    def __init__(self, cin: int, width: int, rng: np.random.Generator, dims: int = 2,
                 input_grad: bool = False):
        super().__init__()
        self.dims = dims
        self.stem = conv_block(cin, width, _k(7, dims), rng, input_grad=input_grad)
        for s in range(3):
            setattr(self, f"pool{s}", MaxPool2d(_k(2, dims)))
            setattr(self, f"down{s}", ResidualBlock(width, width, _k(3, dims), rng))
        for s in range(3):
            setattr(self, f"up{s}", Sequential(ConvTranspose2d(width, width, _k(2, dims), rng, bias=False),
                                               BatchNorm(width), ReLU()))
            # smooths the blocky stride-2 upsampling before the next stage
            setattr(self, f"fuse{s}", ResidualBlock(width, width, _k(3, dims), rng))
        self.out = Conv2d(width, width, 1, rng)

    def forward(self, x):
        skips = [self.stem(x)]
        h = skips[0]
        for s in range(3):
            h = getattr(self, f"down{s}")(getattr(self, f"pool{s}")(h))
            skips.append(h)
        up_shapes = []
        for s in range(3):
            target = skips[2 - s]
            up = getattr(self, f"up{s}")(h)
            up_shapes.append(up.shape)
            h = getattr(self, f"fuse{s}")(up[:, :, :target.shape[2], :target.shape[3]] + target)
        if self.training:
            self._cache = up_shapes
        return self.out(h)

    def backward(self, dy):
        up_shapes = self._need_cache()
        dh = self.out.backward(dy)
        dskips = [None] * 3
        for s in reversed(range(3)):
            dh = getattr(self, f"fuse{s}").backward(dh)
            dskips[2 - s] = dh
            dup = np.zeros(up_shapes[s], dtype=dh.dtype)
            dup[:, :, :dh.shape[2], :dh.shape[3]] = dh
            dh = getattr(self, f"up{s}").backward(dup)
        for s in reversed(range(3)):
            dh = getattr(self, f"pool{s}").backward(getattr(self, f"down{s}").backward(dh))
            dh = dh + dskips[s]
        return self.stem.backward(dh)


class Head(Sequential):
    """3x3 convolution, ReLU, 1x1 convolution."""

    def __init__(self, width: int, cout: int, rng: np.random.Generator, dims: int = 2, final_bias: bool = True):
        super().__init__(Conv2d(width, width, _k(3, dims), rng), ReLU(), Conv2d(width, cout, 1, rng, bias=final_bias))

    @property
    def final(self) -> Conv2d:
        return self._modules["2"]


class HDN2DNet(Module):
    """Bird's-eye-view detector: backbone + heatmap (sigmoid), offset and size heads.

    The size head output is multiplied by ``size_scale`` so it reads in mm.
    """

    def __init__(self, K: int, width: int = 16, rng: np.random.Generator | None = None,
                 size_scale: float = 1000.0, size_prior: float = 1.0, heat_prior: float = 0.0,
                 offset_prior: float = 0.5, input_grad: bool = False):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.K = K
        self.size_scale = size_scale
        self.backbone = EncoderDecoder(K, width, rng, dims=2, input_grad=input_grad)
        self.heat = Head(width, 1, rng)
        self.offset = Head(width, 2, rng)
        self.size = Head(width, 2, rng)
        self.sigmoid = Sigmoid()
        self.heat.final.bias.data[:] = heat_prior
        # regression heads start as constants at their priors
        for head, prior in ((self.offset, offset_prior), (self.size, size_prior)):
            head.final.weight.data[:] = 0.0
            head.final.bias.data[:] = prior

    def forward(self, x):
        f = self.backbone(x)
        return self.sigmoid(self.heat(f)), self.offset(f), self.size(f) * self.size_scale

    def backward(self, dheat, doffset, dsize):
        df = self.heat.backward(self.sigmoid.backward(dheat))
        df = df + self.offset.backward(doffset)
        df = df + self.size.backward(dsize * self.size_scale)
        return self.backbone.backward(df)


class HDN1DNet(Module):
    """Column height estimator: 1D backbone + a single sigmoid heatmap head.

    Input ``(P, K, H)``, output ``(P, H)``.
    """

    def __init__(self, K: int, width: int = 16, rng: np.random.Generator | None = None,
                 heat_prior: float = 0.0, input_grad: bool = False):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.K = K
        self.backbone = EncoderDecoder(K, width, rng, dims=1, input_grad=input_grad)
        self.heat = Head(width, 1, rng, dims=1)
        self.sigmoid = Sigmoid()
        self.heat.final.bias.data[:] = heat_prior

    def forward(self, x):
        if x.ndim != 3 or x.shape[1] != self.K:
            raise ValueError(f"HDN1DNet expects (P, {self.K}, H), got {x.shape}")
        y = self.sigmoid(self.heat(self.backbone(x[:, :, None, :])))
        return y[:, 0, 0, :]

    def backward(self, dy):
        dx = self.backbone.backward(self.heat.backward(self.sigmoid.backward(dy[:, None, None, :])))
        return None if dx is None else dx[:, :, 0, :]


class PoseNet(Module):
    """Plane joint estimator: backbone + one K-channel head + spatial softmax.

    Output maps are non-negative and sum to one over each plane.
    """

    def __init__(self, K: int, width: int = 16, rng: np.random.Generator | None = None,
                 beta: float = 1.0, input_grad: bool = False):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.K = K
        self.backbone = EncoderDecoder(K, width, rng, dims=2, input_grad=input_grad)
        # a per-channel bias is a no-op under the spatial softmax
        self.head = Head(width, K, rng, final_bias=False)
        self.softmax = SpatialSoftmax(beta)

    def forward(self, x):
        return self.softmax(self.head(self.backbone(x)))

    def backward(self, dy):
        return self.backbone.backward(self.head.backward(self.softmax.backward(dy)))


class ConfidenceNet(Sequential):
    """Conv, ReLU, global average pool, fully connected: ``(N, K, A, B) -> (N, K)``."""

    def __init__(self, K: int, width: int = 16, rng: np.random.Generator | None = None,
                 zero_init: bool = True):
        rng = rng if rng is not None else np.random.default_rng(0)
        super().__init__(Conv2d(K, width, 3, rng, input_grad=False), ReLU(), GlobalAvgPool(),
                         Linear(width, K, rng, zero_init=zero_init))
        self.K = K


def build_hdn_2d_backbone(channels_in: int, base_width: int = 16, seed: int = 0, **kw) -> HDN2DNet:
    return HDN2DNet(channels_in, base_width, np.random.default_rng(seed), **kw)


def build_hdn_1d(channels_in: int, base_width: int = 16, seed: int = 1, **kw) -> HDN1DNet:
    return HDN1DNet(channels_in, base_width, np.random.default_rng(seed), **kw)


def build_pose_net(channels_in: int, base_width: int = 16, seed: int = 2, **kw) -> PoseNet:
    return PoseNet(channels_in, base_width, np.random.default_rng(seed), **kw)


def build_confidence_net(K: int, base_width: int = 16, seed: int = 3, **kw) -> ConfidenceNet:
    return ConfidenceNet(K, base_width, np.random.default_rng(seed), **kw)
