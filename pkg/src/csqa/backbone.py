"""Hierarchical convolutional feature extractor emitting one map per stage."""

from dataclasses import dataclass, field

from . import nn
from .errors import ConfigurationError, DimensionError


@dataclass
class BackboneConfig:
    stages: int = 3
    channels: list = field(default_factory=lambda: [16, 32, 64])
    blocks: int = 1
    resolution: int = 64
    stage_stride: int = 2

    def validate(self):
        if self.stages < 3:
            raise ConfigurationError(f"backbone.stages must be >= 3, got {self.stages}")
        if len(self.channels) != self.stages:
            raise ConfigurationError(
                f"backbone.channels has {len(self.channels)} entries for {self.stages} stages")
        if any(b < a for a, b in zip(self.channels, self.channels[1:])):
            raise ConfigurationError(f"backbone.channels must be nondecreasing: {self.channels}")
        if self.blocks < 1:
            raise ConfigurationError("backbone.blocks must be >= 1")
        if self.stage_stride != 2:
            raise ConfigurationError("backbone.stage_stride must be 2")
        if self.resolution % (2 ** self.stages * 2):
            raise ConfigurationError(
                f"backbone.resolution {self.resolution} is not divisible by {2 ** self.stages * 2}")

    def stage_extents(self, resolution=None):
        r = (resolution or self.resolution) // 2
        out = []
        for _ in range(self.stages):
            r //= 2
            out.append(r)
        return out


class StagePyramid(list):
    """Per-stage feature maps ``[B, C^s, H^s, W^s]``, stage 1 first."""

    def last(self, a):
        return self[len(self) - a:]


class Backbone(nn.Module):
    """Stride-2 stem followed by ``stages`` blocks of conv3x3-BN-ReLU.

    The first conv of every stage has stride 2, so the stage-s map has
    extent ``R / 2**(s+1)``.
    """

    def __init__(self, config, rng):
        config.validate()
        self.config = config
        c0 = config.channels[0]
        self.stem = nn.ConvBlock(rng, 3, c0, 3, stride=2)
        self.stages = nn.ModuleList()
        cin = c0
        for cout in config.channels:
            blocks = nn.ModuleList([nn.ConvBlock(rng, cin, cout, 3, stride=2)])
            for _ in range(config.blocks - 1):
                blocks.append(nn.ConvBlock(rng, cout, cout, 3))
            self.stages.append(blocks)
            cin = cout

    def forward(self, image):
        return self.forward_stages(image)

    def forward_stages(self, image):
        if image.ndim != 4 or image.shape[1] != 3:
            raise DimensionError(f"backbone input must be [B,3,R,R], got {image.shape}")
        r = image.shape[2]
        if image.shape[3] != r:
            raise DimensionError(f"backbone input must be square, got {image.shape[2:]} (axes 2, 3)")
        if r not in (self.config.resolution, self.config.resolution // 2):
            raise DimensionError(
                f"input resolution {r} (axis 2) is neither R={self.config.resolution} nor R/2")
        x = self.stem(image)
        maps = StagePyramid()
        for blocks in self.stages:
            for block in blocks:
                x = block(x)
            maps.append(x)
        return maps

    def shared_view(self):
        return SharedBackbone(self)


class SharedBackbone:
    """A second handle on a :class:`Backbone`; reads and updates the same parameters.

    Batch norm running statistics are left alone on this path, so they only
    describe full images, which is what inference sees.
    """

    def __init__(self, backbone):
        self.base = backbone

    def __call__(self, image):
        with nn.frozen_statistics(self.base):
            return self.base.forward_stages(image)

    forward_stages = __call__

    def parameters(self):
        return self.base.parameters()

    def named_parameters(self, prefix=""):
        return self.base.named_parameters(prefix)
