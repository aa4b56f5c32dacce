"""Multi-level semantic quality evaluation over the last A backbone stages."""

from dataclasses import dataclass, field

from . import nn
from . import tensor as T
from .errors import ConfigurationError, DimensionError, UsageError
from .qp import QpClassifier


@dataclass
class MlsqeConfig:
    stages_used: int = 3
    proj_channels: int = 32
    alphas: list = field(default_factory=lambda: [0.7, 0.8, 0.9, 1.0])
    eca_kernel: int = 3
    proj_gain: float = 0.2

    def validate(self, num_stages=None):
        if self.stages_used < 1:
            raise ConfigurationError("mlsqe.stages_used must be >= 1")
        if num_stages is not None and self.stages_used > num_stages:
            raise ConfigurationError(
                f"mlsqe.stages_used={self.stages_used} exceeds backbone stages {num_stages}")
        if self.proj_channels <= 0:
            raise ConfigurationError("mlsqe.proj_channels must be positive")
        if len(self.alphas) != self.stages_used + 1:
            raise ConfigurationError(
                f"mlsqe.alphas needs {self.stages_used + 1} entries, got {len(self.alphas)}")
        if any(b < a for a, b in zip(self.alphas, self.alphas[1:])):
            raise ConfigurationError(f"mlsqe.alphas must be ascending: {self.alphas}")
        if self.proj_gain <= 0:
            raise ConfigurationError(f"mlsqe.proj_gain must be positive, got {self.proj_gain}")
        if self.eca_kernel % 2 == 0:
            raise ConfigurationError(f"mlsqe.eca_kernel must be odd, got {self.eca_kernel}")


def eca_enhance(F, weight):
    """Gate each channel of ``F`` by sigmoid of a 1-d conv over its pooled channel vector."""
    F = T.as_tensor(F)
    k = weight.shape[-1]
    if k % 2 == 0:
        raise ConfigurationError(f"ECA kernel size must be odd, got {k}")
    if F.ndim != 4:
        raise DimensionError(f"eca input must be [B,C,H,W], got {F.shape}")
    b, c = F.shape[:2]
    pooled = T.reshape(T.pool_global(F, "avg"), (b, 1, c))
    gate = T.sigmoid(T.conv1d(pooled, weight, padding=k // 2))
    return F * T.reshape(gate, (b, c, 1, 1))


class Eca(nn.Module):
    def __init__(self, rng, kernel=3):
        if kernel % 2 == 0:
            raise ConfigurationError(f"ECA kernel size must be odd, got {kernel}")
        self.weight = nn.Parameter(nn.fan_in_uniform(rng, (1, 1, kernel), kernel))

    def forward(self, F):
        return eca_enhance(F, self.weight)


class Projection(nn.Module):
    """Convolution block ``B^s``: 1x1 conv to C* channels, batch norm, ReLU.

    The batch-norm scale starts at ``gain`` so the max-pooled vectors feeding the
    linear heads start with a small norm; unit scale makes the heads overshoot.
    """

    def __init__(self, rng, cin, cout, gain=1.0):
        self.block = nn.ConvBlock(rng, cin, cout, k=1)
        self.block.norm.weight.data[...] = gain

    def forward(self, F):
        return self.block(F)


def fuse(vectors, count=None):
    """Concatenate per-stage vectors (ascending stage order) along the feature axis."""
    if count is not None and len(vectors) != count:
        raise UsageError(f"fuse expects {count} stage vectors, got {len(vectors)}")
    if not vectors:
        raise UsageError("fuse needs at least one vector")
    return T.concat(vectors, axis=-1)


@dataclass
class StageVectors:
    vectors: list
    fusion: T.Tensor

    def all(self):
        return list(self.vectors) + [self.fusion]


class Mlsqe(nn.Module):
    """ECA + projection per used stage; emits ``StageVectors`` from a pyramid."""

    def __init__(self, config, stage_channels, rng):
        config.validate(len(stage_channels))
        self.config = config
        self.first_stage = len(stage_channels) - config.stages_used
        used = stage_channels[self.first_stage:]
        self.eca = nn.ModuleList([Eca(rng, config.eca_kernel) for _ in used])
        self.proj = nn.ModuleList([Projection(rng, c, config.proj_channels, config.proj_gain) for c in used])

    def project_stage(self, F_hat, index):
        """``GMP(B^s(F_hat))`` for the ``index``-th used stage (0-based within the last A)."""
        if not 0 <= index < self.config.stages_used:
            raise UsageError(f"stage index {index} is outside the last {self.config.stages_used} stages")
        return T.pool_global(self.proj[index](F_hat), "max")

    def forward(self, pyramid):
        maps = pyramid[self.first_stage:]
        vecs = [self.project_stage(self.eca[i](F), i) for i, F in enumerate(maps)]
        return StageVectors(vecs, fuse(vecs, self.config.stages_used))


def build_classifiers(config, num_classes, rng, lam=2.0, delta=2, seed=0):
    """One QP classifier per stage index ``S-A+1 .. S+1`` (the last one sees the fusion)."""
    a, c = config.stages_used, config.proj_channels
    dims = [c] * a + [a * c]
    return nn.ModuleList([
        QpClassifier(rng, d, num_classes, alpha, lam=lam, delta=delta, seed=seed * 1000 + i)
        for i, (d, alpha) in enumerate(zip(dims, config.alphas))
    ])


def branch_loss(stage_vectors, labels, qps, include_aux=True):
    """Sum over stage indices of ``sce + ce + reg``; returns ``(loss, outcomes)``.

    ``include_aux=False`` drops the auxiliary ``ce`` terms (they carry no
    gradient into the feature either way).
    """
    feats = stage_vectors.all()
    if len(qps) != len(feats):
        raise UsageError(f"{len(qps)} QP classifiers for {len(feats)} stage vectors")
    total, outcomes = None, []
    for qp, f in zip(qps, feats):
        loss, outcome = qp.loss(f, labels, include_aux)
        total = loss if total is None else total + loss
        outcomes.append(outcome)
    return total, outcomes


image_branch_loss = branch_loss


def stage_logits(stage_vectors, qps):
    """Main-head logits per stage index (inference path, no auxiliary heads)."""
    return [qp.main(f) for qp, f in zip(qps, stage_vectors.all())]


def ensemble_logits(logits):
    out = logits[0]
    for z in logits[1:]:
        out = out + z
    return out
