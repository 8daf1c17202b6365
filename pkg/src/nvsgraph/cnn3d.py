"""3D convolutional temporal head over stacked grid clips.

Clips are exchanged as (H, W, C, S) arrays, or (B, H, W, C, S) for a batch.
Internally every layer works channels-last on (B, H, W, T, C) volumes so the
im2col patches line up with the weight matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffengine as de
from .diffengine import DiffArray
from .layers import BatchNorm, Linear, Module, uniform_init

TAGS = ("plain3d", "res3d")
FIRST_POOL_STRIDE = (2, 2, 1)
POOL_WINDOW = (2, 2, 2)


def clip_to_volume(clip) -> DiffArray:
    """(H, W, C, S) or (B, H, W, C, S) -> (B, H, W, S, C)."""
    clip = de.as_diff(clip)
    if clip.ndim == 4:
        clip = de.reshape(clip, (1,) + clip.shape)
    if clip.ndim != 5:
        raise ValueError(f"expected a 4-D or 5-D clip, got shape {clip.shape}")
    return de.transpose(clip, (0, 1, 2, 4, 3))


def volume_to_clip(volume: DiffArray, squeeze: bool = True) -> DiffArray:
    out = de.transpose(volume, (0, 1, 2, 4, 3))
    if squeeze and out.shape[0] == 1:
        out = de.reshape(out, out.shape[1:])
    return out


class Conv3D(Module):
    """3x3x3 convolution, stride 1, zero 'same' padding, then optional batch norm and relu."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator,
                 kernel: int = 3, batch_norm: bool = True, activation: str | None = "relu"):
        if kernel % 2 != 1:
            raise ValueError("same padding needs an odd kernel")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.activation = activation
        fan_in = in_channels * kernel**3
        self.weight = uniform_init(rng, (out_channels, in_channels, kernel, kernel, kernel), fan_in)
        self.bias = DiffArray(np.zeros(out_channels), requires_grad=True)
        self.bn = BatchNorm(out_channels) if batch_norm else None

    def forward(self, volume: DiffArray) -> DiffArray:
        return conv3d_volume(volume, self)


def conv3d_volume(volume: DiffArray, layer: Conv3D) -> DiffArray:
    volume = de.as_diff(volume)
    if volume.ndim != 5 or volume.shape[-1] != layer.in_channels:
        raise ValueError(f"expected (B, H, W, T, {layer.in_channels}) input, got {volume.shape}")
    k = layer.kernel
    r = k // 2
    b, h, w, t, _ = volume.shape
    padded = de.pad(volume, ((0, 0), (r, r), (r, r), (r, r), (0, 0)))
    cols = de.unfold3d(padded, (k, k, k))
    # weight (out, in, kh, kw, kt) -> rows ordered (kh, kw, kt, in) to match the patch layout
    wmat = de.reshape(de.transpose(layer.weight, (2, 3, 4, 1, 0)), (k**3 * layer.in_channels, layer.out_channels))
    out = de.matmul(de.reshape(cols, (b * h * w * t, k**3 * layer.in_channels)), wmat) + layer.bias
    out = de.reshape(out, (b, h, w, t, layer.out_channels))
    if layer.bn is not None:
        out = layer.bn(out)
    if layer.activation == "relu":
        out = de.relu(out)
    return out


def conv3d_forward(clip, layer: Conv3D) -> DiffArray:
    """Convolve an (H, W, C, S) clip; returns (H, W, C_out, S)."""
    return volume_to_clip(conv3d_volume(clip_to_volume(clip), layer), squeeze=de.as_diff(clip).ndim == 4)


def pool3d(clip, window=POOL_WINDOW, stride=POOL_WINDOW) -> DiffArray:
    """Max pooling of an (H, W, C, S) clip over (H, W, S) windows, floor output size."""
    single = de.as_diff(clip).ndim == 4
    return volume_to_clip(de.max_pool3d(clip_to_volume(clip), window, stride), squeeze=single)


@dataclass(frozen=True)
class Pool3D:
    """Max pooling stage of the head.

    An axis shorter than the window is pooled over its whole length, so short
    clips (few graphs per sample) still pass through every stage.
    """

    window: tuple[int, int, int] = POOL_WINDOW
    stride: tuple[int, int, int] = POOL_WINDOW

    def fitted(self, hwt) -> tuple[tuple[int, ...], tuple[int, ...]]:
        window = tuple(min(wnd, d) for d, wnd in zip(hwt, self.window))
        stride = tuple(s if d >= wnd else d for d, wnd, s in zip(hwt, self.window, self.stride))
        return window, stride

    def __call__(self, volume: DiffArray) -> DiffArray:
        window, stride = self.fitted(volume.shape[1:4])
        return de.max_pool3d(volume, window, stride)

    def out_shape(self, hwt: tuple[int, int, int]) -> tuple[int, int, int]:
        if min(hwt) < 1:
            raise ValueError(f"empty pooling input {hwt}")
        window, stride = self.fitted(hwt)
        return tuple((d - wnd) // s + 1 for d, wnd, s in zip(hwt, window, stride))


class Residual3DBlock(Module):
    """relu(conv2(conv1(x)) + shortcut(x)) with c_in -> c_inter -> c_out and a 1x1x1 projection."""

    def __init__(self, c_in: int, c_inter: int, c_out: int, rng: np.random.Generator):
        self.in_channels = c_in
        self.out_channels = c_out
        self.conv1 = Conv3D(c_in, c_inter, rng)
        self.conv2 = Conv3D(c_inter, c_out, rng, activation=None)
        self.shortcut = Conv3D(c_in, c_out, rng, kernel=1, activation=None)

    def forward(self, volume: DiffArray) -> DiffArray:
        return de.relu(self.conv2(self.conv1(volume)) + self.shortcut(volume))


def global_avg_pool(volume: DiffArray) -> DiffArray:
    """(B, H, W, T, C) -> (B, C)."""
    return de.reduce_mean(volume, axis=(1, 2, 3))


def scaled(channels: int, width: float) -> int:
    return max(1, int(round(channels * width)))


def temporal_plan(tag: str, in_channels: int = 128, width: float = 1.0) -> list[tuple]:
    """Stage list: ``("conv", c_in, c_out)`` or ``("res", c_in, c_inter, c_out)``, each followed by a pool."""
    if tag not in TAGS:
        raise ValueError(f"unknown temporal architecture {tag!r}; expected one of {TAGS}")
    plan: list[tuple] = []
    c = in_channels
    if tag == "plain3d":
        for base in (128, 256, 512, 512):
            plan.append(("conv", c, scaled(base, width)))
            c = scaled(base, width)
    else:
        for inter, out in ((256, 512), (512, 1024)):
            plan.append(("res", c, scaled(inter, width), scaled(out, width)))
            c = scaled(out, width)
    return plan


def pool_chain(n: int) -> list[Pool3D]:
    return [Pool3D(POOL_WINDOW, FIRST_POOL_STRIDE if i == 0 else POOL_WINDOW) for i in range(n)]


def trace_temporal(plan: list[tuple], num_classes: int, h: int, w: int, t: int) -> list[dict]:
    """Per-layer input/output (H, W, T, C) of the head for an (h, w, t) input grid."""
    rows = []
    dims = (h, w, t)
    c = plan[0][1] if plan else 0

    def conv_row(name, c_in, c_out, k=3):
        rows.append({"layer": name, "kind": "conv3d", "in": dims + (c_in,), "out": dims + (c_out,), "kernel": k})

    for i, (stage, pool) in enumerate(zip(plan, pool_chain(len(plan)))):
        if stage[0] == "res":
            _, c_in, c_inter, c_out = stage
            conv_row(f"stages.{i}.conv1", c_in, c_inter)
            conv_row(f"stages.{i}.conv2", c_inter, c_out)
            conv_row(f"stages.{i}.shortcut", c_in, c_out, 1)
        else:
            _, c_in, c_out = stage
            conv_row(f"stages.{i}", c_in, c_out)
        c = c_out
        new = pool.out_shape(dims)
        rows.append({"layer": f"pools.{i}", "kind": "pool3d", "in": dims + (c,), "out": new + (c,)})
        dims = new
    rows.append({"layer": "gap", "kind": "gap", "in": dims + (c,), "out": (c,)})
    rows.append({"layer": "fc", "kind": "fc", "in": (c,), "out": (num_classes,)})
    return rows


class TemporalNet(Module):
    def __init__(self, tag: str, num_classes: int, rng: np.random.Generator,
                 in_channels: int = 128, width: float = 1.0):
        self.tag = tag
        self.in_channels = in_channels
        self.num_classes = num_classes
        self.width = width
        self.plan = temporal_plan(tag, in_channels, width)
        stages: list[Module] = []
        for stage in self.plan:
            if stage[0] == "conv":
                stages.append(Conv3D(stage[1], stage[2], rng))
            else:
                stages.append(Residual3DBlock(stage[1], stage[2], stage[3], rng))
        self.stages = stages
        self.pools = pool_chain(len(stages))
        self.fc = Linear(stages[-1].out_channels, num_classes, rng)

    def features(self, volume: DiffArray) -> DiffArray:
        for stage, pool in zip(self.stages, self.pools):
            volume = pool(stage(volume))
        return global_avg_pool(volume)

    def forward(self, clip) -> DiffArray:
        """Logits (B, Q) for an (H, W, C, S) or (B, H, W, C, S) clip."""
        return self.fc(self.features(clip_to_volume(clip)))

    def layer_widths(self) -> list[int]:
        return [s.out_channels for s in self.stages]

    def trace(self, h: int, w: int, t: int) -> list[dict]:
        return trace_temporal(self.plan, self.num_classes, h, w, t)


def build_temporal_net(tag: str, num_classes: int, in_channels: int = 128, width: float = 1.0,
                       rng: np.random.Generator | None = None) -> TemporalNet:
    return TemporalNet(tag, num_classes, rng if rng is not None else np.random.default_rng(0), in_channels, width)
