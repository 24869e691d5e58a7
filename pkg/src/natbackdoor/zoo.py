"""Small classifier families used as substitutes and black-box targets.

All networks share one layout: a normalization step, a list of ``stages`` whose
outputs are 4-d feature maps, a channel mask on the last map (used by activation
pruning), global average pooling and a linear head. ``forward_features`` exposes
every stage output so defenses can tap intermediate representations.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import ConfigurationError

FAMILIES = ("small-resnet", "small-vgg", "small-mobilenet", "small-shufflenet", "mlp")


@dataclass(frozen=True)
class ModelSpec:
    family: str
    num_classes: int
    width: int = 16
    depth: int = 2

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown model family {self.family!r}; choose from {FAMILIES}")
        if self.num_classes < 1 or self.width < 1 or self.depth < 1:
            raise ConfigurationError("num_classes, width and depth must be positive")

    def to_dict(self):
        return {"family": self.family, "num_classes": self.num_classes,
                "width": self.width, "depth": self.depth}

    @classmethod
    def from_dict(cls, d):
        return cls(family=d["family"], num_classes=int(d["num_classes"]),
                   width=int(d.get("width", 16)), depth=int(d.get("depth", 2)))


def _conv_bn(cin, cout, kernel=3, stride=1, groups=1, act=nn.ReLU):
    layers = [
        nn.Conv2d(cin, cout, kernel, stride=stride, padding=kernel // 2, groups=groups, bias=False),
        nn.BatchNorm2d(cout),
    ]
    if act is not None:
        layers.append(act())
    return nn.Sequential(*layers)


class ResidualBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.body = nn.Sequential(
            _conv_bn(cin, cout, stride=stride),
            _conv_bn(cout, cout, act=None),
        )
        self.shortcut = nn.Identity()
        if stride != 1 or cin != cout:
            self.shortcut = _conv_bn(cin, cout, kernel=1, stride=stride, act=None)
        self.act = nn.ReLU()

    def forward(self, x):
        return self.act(self.body(x) + self.shortcut(x))


class DepthwiseSeparable(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.dw = _conv_bn(cin, cin, stride=stride, groups=cin, act=nn.ReLU6)
        self.pw = _conv_bn(cin, cout, kernel=1, act=nn.ReLU6)

    def forward(self, x):
        return self.pw(self.dw(x))


def channel_shuffle(x, groups):
    b, c, h, w = x.shape
    return x.view(b, groups, c // groups, h, w).transpose(1, 2).reshape(b, c, h, w)


class ShuffleUnit(nn.Module):
    def __init__(self, cin, cout, stride, groups=2):
        super().__init__()
        self.groups = groups
        self.reduce = _conv_bn(cin, cout, kernel=1, groups=groups)
        self.dw = _conv_bn(cout, cout, stride=stride, groups=cout, act=None)
        self.expand = _conv_bn(cout, cout, kernel=1, groups=groups, act=None)
        self.shortcut = nn.Identity()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.AvgPool2d(stride, stride) if stride > 1 else nn.Identity(),
                                          _conv_bn(cin, cout, kernel=1, act=None))
        self.act = nn.ReLU()

    def forward(self, x):
        out = channel_shuffle(self.reduce(x), self.groups)
        out = self.expand(self.dw(out))
        return self.act(out + self.shortcut(x))


class Flattened(nn.Module):
    """Dense layer + ReLU whose output is reshaped to a 1x1 feature map."""

    def __init__(self, cin, cout):
        super().__init__()
        self.fc = nn.Linear(cin, cout)
        self.act = nn.ReLU()

    def forward(self, x):
        return self.act(self.fc(x.flatten(1)))[:, :, None, None]


class ZooNet(nn.Module):
    def __init__(self, spec: ModelSpec, stages, feature_channels, mean, std):
        super().__init__()
        self.spec = spec
        self.stages = nn.ModuleList(stages)
        self.head = nn.Linear(feature_channels, spec.num_classes)
        dtype = torch.get_default_dtype()
        self.register_buffer("mean", torch.tensor(mean, dtype=dtype).view(1, -1, 1, 1))
        self.register_buffer("std", torch.tensor(std, dtype=dtype).view(1, -1, 1, 1))
        self.register_buffer("channel_mask", torch.ones(feature_channels, dtype=dtype))

    def forward_features(self, x):
        out = (x - self.mean) / self.std
        maps = []
        for stage in self.stages:
            out = stage(out)
            maps.append(out)
        maps[-1] = maps[-1] * self.channel_mask.view(1, -1, 1, 1)
        return maps

    def forward(self, x):
        tap = self.forward_features(x)[-1]
        return self.head(tap.mean(dim=(2, 3)))


def build_model(spec: ModelSpec, input_shape, mean, std) -> ZooNet:
    """Instantiate a network for ``spec`` on inputs of shape (C, H, W)."""
    channels, height, width = input_shape
    w, d = spec.width, spec.depth
    if spec.family == "mlp":
        dims = [channels * height * width] + [w * 4] * d
        stages = [Flattened(a, b) for a, b in zip(dims[:-1], dims[1:])]
        return ZooNet(spec, stages, dims[-1], mean, std)

    if spec.family == "small-resnet":
        stages = [_conv_bn(channels, w)]
        cin = w
        for i in range(d):
            cout = w * 2 ** min(i, 2)
            stages.append(ResidualBlock(cin, cout, stride=1 if i == 0 else 2))
            cin = cout
    elif spec.family == "small-vgg":
        stages, cin = [], channels
        for i in range(d):
            cout = w * 2 ** min(i, 2)
            stages.append(nn.Sequential(_conv_bn(cin, cout), _conv_bn(cout, cout)))
            if i < d - 1:
                stages.append(nn.MaxPool2d(2))
            cin = cout
    elif spec.family == "small-mobilenet":
        stages = [_conv_bn(channels, w, act=nn.ReLU6)]
        cin = w
        for i in range(d):
            cout = w * 2 ** min(i + 1, 3)
            stages.append(DepthwiseSeparable(cin, cout, stride=2 if i % 2 == 0 else 1))
            cin = cout
    else:  # small-shufflenet
        stages = [_conv_bn(channels, w)]
        cin = w
        for i in range(d):
            cout = w * 2 ** min(i + 1, 3)
            stages.append(ShuffleUnit(cin, cout, stride=2 if i % 2 == 0 else 1))
            cin = cout
    return ZooNet(spec, stages, cin, mean, std)


def count_parameters(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())
