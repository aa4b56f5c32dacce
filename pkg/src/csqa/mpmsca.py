"""Multi-part multi-scale cross-attention between global and part tokens."""

import math
from dataclasses import dataclass

import numpy as np

from . import instrument, nn
from . import tensor as T
from .errors import ConfigurationError, DimensionError, UsageError
from .mlsqe import StageVectors, branch_loss, fuse


@dataclass
class AttentionConfig:
    heads: int = 4
    top_v: int = 3
    beta_init: float = 0.5
    literal_mask: bool = False
    dw_kernel: int = 3

    def validate(self, channels=None, length=None):
        if self.heads < 1:
            raise ConfigurationError("attention.heads must be >= 1")
        if channels is not None and channels % self.heads:
            raise ConfigurationError(f"C*={channels} is not divisible by attention.heads={self.heads}")
        if self.top_v < 1:
            raise ConfigurationError("attention.top_v must be >= 1")
        if length is not None and self.top_v > length:
            raise ConfigurationError(f"attention.top_v={self.top_v} exceeds sequence length {length}")
        if self.dw_kernel % 2 == 0:
            raise ConfigurationError("attention.dw_kernel must be odd")


def part_tokens(part_maps, projections, parts):
    """Per-stage part tokens ``[B, N, C*]`` and their sequence concatenation ``t_P``.

    ``part_maps`` holds the last A stage maps of the ``B*N`` part batch (part
    index fastest); token ``(stage k, part n)`` lands at position ``k*N + n``.
    """
    tokens = []
    for f, proj in zip(part_maps, projections):
        if f.shape[0] % parts:
            raise UsageError(f"part batch of {f.shape[0]} is not divisible by N={parts}")
        v = T.pool_global(proj(f), "avg")
        tokens.append(T.reshape(v, (f.shape[0] // parts, parts, v.shape[1])))
    return tokens, T.concat(tokens, axis=1)


def top_v_mask(logits, v):
    """Boolean mask keeping the ``v`` largest entries of each row (lower index wins ties)."""
    order = np.argsort(-logits, axis=-1, kind="stable")[..., :v]
    mask = np.zeros(logits.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=-1)
    return mask


def split_residual(Y, tokens):
    """Split ``Y`` back into per-stage blocks, add the stage tokens, average over parts."""
    n = tokens[0].shape[1]
    if Y.shape[1] != n * len(tokens):
        raise DimensionError(f"Y sequence axis (1) has {Y.shape[1]} tokens, expected {n * len(tokens)}")
    return [T.mean(Y[:, k * n:(k + 1) * n] + t, axis=1) for k, t in enumerate(tokens)]


def split_blocks(Y, parts):
    return [Y[:, k * parts:(k + 1) * parts] for k in range(Y.shape[1] // parts)]


class Mpmsca(nn.Module):
    def __init__(self, config, channels, stages_used, parts, rng):
        self.length = stages_used * parts
        config.validate(channels, self.length)
        self.config = config
        self.channels, self.stages_used, self.parts = channels, stages_used, parts
        c = channels
        self.reduce = nn.Linear(rng, stages_used * c, c)
        self.phi_im = nn.Linear(rng, c, c)
        self.phi_part = nn.Linear(rng, c, c)
        self.norm = nn.LayerNorm(c)
        k = config.dw_kernel
        self.dw_weight = nn.Parameter(nn.fan_in_uniform(rng, (2 * c, 1, k), k))
        self.dw_bias = nn.Parameter(np.zeros(2 * c))
        self.wq = nn.Linear(rng, 2 * c, c, bias=False)
        self.wk = nn.Linear(rng, c, c, bias=False)
        self.wv = nn.Linear(rng, c, c, bias=False)
        self.wo = nn.Linear(rng, c, c, bias=False)
        self.beta = nn.Parameter(np.array(config.beta_init))
        self.last_attention = None

    def image_tokens(self, fusion):
        """Reduce the fused image vector to C* and replicate it along the sequence."""
        if fusion.shape[-1] != self.stages_used * self.channels:
            raise DimensionError(
                f"fusion vector has {fusion.shape[-1]} entries, expected {self.stages_used * self.channels}")
        t = self.reduce(fusion)
        b = t.shape[0]
        return T.broadcast_to(T.reshape(t, (b, 1, self.channels)), (b, self.length, self.channels))

    def _heads(self, x):
        b, l, _ = x.shape
        h = self.config.heads
        return T.transpose(T.reshape(x, (b, l, h, self.channels // h)), (0, 2, 1, 3))

    def attention(self, t_im, t_part):
        """Masked multi-head cross-attention; returns ``Y`` ``[B, L, C*]``."""
        if t_im.shape != t_part.shape or t_im.ndim != 3:
            raise DimensionError(f"token shapes differ or are not [B,L,C*]: {t_im.shape} vs {t_part.shape}")
        b, l, c = t_part.shape
        v = self.config.top_v
        if v > l:
            raise ConfigurationError(f"top_v={v} exceeds sequence length {l}")
        instrument.hit("mpmsca")
        q_in = T.concat([self.phi_im(t_im), self.phi_part(self.norm(t_part))], axis=-1)
        q_in = T.conv1d(T.transpose(q_in, (0, 2, 1)), self.dw_weight, self.dw_bias,
                        padding=self.config.dw_kernel // 2, groups=2 * c)
        q = self._heads(self.wq(T.transpose(q_in, (0, 2, 1))))
        k = self._heads(self.wk(t_part))
        val = self._heads(self.wv(t_part))
        logits = T.matmul(q, T.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(c / self.config.heads))
        mask = top_v_mask(logits.data, v)
        if self.config.literal_mask:
            attn = T.softmax(logits * mask, axis=-1)
        else:
            attn = T.softmax(logits, axis=-1, mask=mask)
        self.last_attention = attn.data
        u = T.reshape(T.transpose(T.matmul(attn, val), (0, 2, 1, 3)), (b, l, c))
        return (1.0 - self.beta) * self.wo(u) + self.beta * t_part

    def forward(self, fusion, tokens, t_part):
        """Return the per-stage part vectors plus their fusion as ``StageVectors``."""
        y = self.attention(self.image_tokens(fusion), t_part)
        vecs = split_residual(y, tokens)
        return StageVectors(vecs, fuse(vecs, self.stages_used))


def part_branch_loss(stage_vectors, labels, qps, include_aux=True):
    """Same three-term QP loss as the image branch, through the shared classifiers."""
    return branch_loss(stage_vectors, labels, qps, include_aux)
