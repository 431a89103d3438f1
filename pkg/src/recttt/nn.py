"""Convolutional building blocks and the encoder / bottleneck / decoder / head assemblies.

Modules own :class:`Parameter` objects and, for batch norm, running-statistic
buffers.  A forward pass takes the :class:`Graph` to record into.
"""
from __future__ import annotations

from typing import Iterator, Sequence

import numpy as np

from . import ops
from .autodiff import Graph, Parameter, Var
from .tensor import DTYPE, Rng, ShapeError

BN_MODES = ("train", "eval", "batch")


class Module:
    """Minimal container: parameters, buffers and sub-modules are discovered by attribute."""

    def _children(self) -> Iterator[tuple[str, "Module"]]:
        for name, val in vars(self).items():
            if isinstance(val, Module):
                yield name, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def _own_parameters(self) -> Iterator[tuple[str, Parameter]]:
        for name, val in vars(self).items():
            if isinstance(val, Parameter):
                yield name, val

    def _own_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(())

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._own_parameters():
            yield prefix + name, p
        for name, child in self._children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._own_buffers():
            yield prefix + name, b
        for name, child in self._children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def state(self, prefix: str = "") -> dict[str, np.ndarray]:
        """Every parameter and buffer array, keyed by dotted name (live references)."""
        out = {n: p.value for n, p in self.named_parameters(prefix)}
        out.update(self.named_buffers(prefix))
        return out

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self._children():
            yield from child.modules()

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.trainable = flag

    def set_bn_mode(self, mode: str) -> None:
        for m in self.modules():
            if isinstance(m, BatchNorm):
                m.mode = mode

    def name_parameters(self, prefix: str = "") -> None:
        for name, p in self.named_parameters(prefix):
            p.name = name


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, k: int, stride: int, rng: Rng):
        if k % 2 != 1:
            raise ValueError("kernel size must be odd")
        fan_in = in_ch * k * k
        self.weight = Parameter(rng.normal((out_ch, in_ch, k, k), 0.0, float(np.sqrt(2.0 / fan_in))))
        self.bias = Parameter(np.zeros(out_ch, DTYPE))
        self.stride = stride
        self.padding = (k - 1) // 2

    def __call__(self, g: Graph, x: Var) -> Var:
        return ops.conv2d(x, g.param(self.weight), g.param(self.bias), self.stride, self.padding)


class BatchNorm(Module):
    """Batch normalization with three modes.

    ``train``: normalize by batch statistics and fold them into the running
    statistics.  ``eval``: normalize by running statistics.  ``batch``: batch
    statistics without touching the running ones (test-batch normalization).
    """

    def __init__(self, ch: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(ch, DTYPE))
        self.beta = Parameter(np.zeros(ch, DTYPE))
        self.running_mean = np.zeros(ch, DTYPE)
        self.running_var = np.ones(ch, DTYPE)
        self.momentum = momentum
        self.eps = eps
        self.mode = "train"

    def _own_buffers(self):
        yield "running_mean", self.running_mean
        yield "running_var", self.running_var

    def __call__(self, g: Graph, x: Var) -> Var:
        if self.mode == "eval":
            return ops.batchnorm(x, g.param(self.gamma), g.param(self.beta),
                                 self.running_mean, self.running_var, self.eps, batch_stats=False)
        if self.mode not in BN_MODES:
            raise ValueError(f"unknown batchnorm mode {self.mode!r}")
        if x.shape[0] < 2:
            raise ShapeError("batchnorm on batch statistics needs batch size >= 2")
        mu, var = ops.batch_moments(x.value)
        if self.mode == "train":
            m = x.value.size // x.shape[1]
            unbiased = var * m / max(m - 1, 1)
            # in place: snapshots and checkpoints hold references to these arrays
            self.running_mean[...] = (1 - self.momentum) * self.running_mean + self.momentum * mu
            self.running_var[...] = (1 - self.momentum) * self.running_var + self.momentum * unbiased
        return ops.batchnorm(x, g.param(self.gamma), g.param(self.beta), mu, var, self.eps, batch_stats=True)


class Linear(Module):
    def __init__(self, in_f: int, out_f: int, rng: Rng):
        bound = 1.0 / np.sqrt(in_f)
        self.weight = Parameter(rng.uniform((out_f, in_f), -bound, bound))
        self.bias = Parameter(np.zeros(out_f, DTYPE))

    def __call__(self, g: Graph, x: Var) -> Var:
        return ops.linear(x, g.param(self.weight), g.param(self.bias))


class ConvBN(Module):
    def __init__(self, in_ch, out_ch, k, stride, rng, relu=True):
        self.conv = Conv2d(in_ch, out_ch, k, stride, rng)
        self.bn = BatchNorm(out_ch)
        self.relu = relu

    def __call__(self, g: Graph, x: Var) -> Var:
        y = self.bn(g, self.conv(g, x))
        return ops.relu(y) if self.relu else y


class ResBlock(Module):
    """Two 3x3 conv-BN layers plus a (projected when needed) shortcut."""

    def __init__(self, in_ch: int, out_ch: int, stride: int, rng: Rng):
        self.conv1 = ConvBN(in_ch, out_ch, 3, stride, rng)
        self.conv2 = ConvBN(out_ch, out_ch, 3, 1, rng, relu=False)
        self.shortcut = ConvBN(in_ch, out_ch, 1, stride, rng, relu=False) if (stride != 1 or in_ch != out_ch) else None

    def __call__(self, g: Graph, x: Var) -> Var:
        y = self.conv2(g, self.conv1(g, x))
        s = self.shortcut(g, x) if self.shortcut is not None else x
        return ops.relu(ops.add(y, s))


class Encoder(Module):
    """Stem followed by ``L`` stride-2 residual blocks; emits one feature map per block.

    ``channels`` = (stem, block 1, ..., block L).
    """

    def __init__(self, channels: Sequence[int], rng: Rng, in_ch: int = 3):
        self.channels = tuple(channels)
        self.stem = ConvBN(in_ch, channels[0], 3, 1, rng)
        self.blocks = [ResBlock(channels[i], channels[i + 1], 2, rng) for i in range(len(channels) - 1)]

    @property
    def depth(self) -> int:
        return len(self.blocks)

    def __call__(self, g: Graph, x: Var) -> list[Var]:
        h, w = x.shape[2], x.shape[3]
        if h % 2 ** self.depth or w % 2 ** self.depth:
            raise ShapeError(f"input {h}x{w} not divisible by 2^{self.depth}")
        y = self.stem(g, x)
        feats = []
        for block in self.blocks:
            y = block(g, y)
            feats.append(y)
        return feats

    def adapt_modules(self, depth: int) -> list[Module]:
        """Stem plus the first ``depth`` blocks: the part updated at test time."""
        return [self.stem, *self.blocks[:depth]]


class Bottleneck(Module):
    def __init__(self, ch: int, rng: Rng):
        self.block = ResBlock(ch, ch, 1, rng)

    def __call__(self, g: Graph, x: Var) -> Var:
        return self.block(g, x)


class Decoder(Module):
    """Mirror of the encoder: one stage per encoder block, deepest first.

    The first stage works at the bottleneck resolution (aligned with the
    deepest encoder feature); every later stage upsamples 2x (nearest) and
    halves channels with a 3x3 conv.  Outputs are returned shallow-first so
    index ``l`` lines up with encoder feature ``l``.
    """

    def __init__(self, channels: Sequence[int], rng: Rng):
        block_ch = list(channels[1:])
        self.channels = tuple(channels)
        deep_first = block_ch[::-1]
        self.stages = [ConvBN(deep_first[0], deep_first[0], 3, 1, rng)]
        for a, b in zip(deep_first[:-1], deep_first[1:]):
            self.stages.append(ConvBN(a, b, 3, 1, rng))

    def __call__(self, g: Graph, x: Var) -> list[Var]:
        outs = []
        y = x
        for i, stage in enumerate(self.stages):
            if i > 0:
                y = ops.upsample2x(y)
            y = stage(g, y)
            outs.append(y)
        return outs[::-1]


class ClassifierHead(Module):
    def __init__(self, ch: int, n_classes: int, rng: Rng):
        self.fc = Linear(ch, n_classes, rng)

    def __call__(self, g: Graph, feat: Var) -> Var:
        if feat.value.ndim != 4:
            raise ShapeError(f"classifier expects NCHW features, got {feat.shape}")
        return self.fc(g, ops.global_avgpool(feat))


def check_mirror(enc_feats: Sequence[Var], dec_feats: Sequence[Var]) -> None:
    if len(enc_feats) != len(dec_feats):
        raise ShapeError(f"pyramid depth {len(enc_feats)} vs {len(dec_feats)}")
    for i, (e, d) in enumerate(zip(enc_feats, dec_feats)):
        if e.shape != d.shape:
            raise ShapeError(f"layer {i + 1}: encoder {e.shape} vs decoder {d.shape}")
