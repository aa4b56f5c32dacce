"""Part navigator: scale pyramid with SAE exchange, anchor scoring, NMS and cropping."""

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import instrument, kernels, nn
from . import tensor as T
from .errors import ConfigurationError, DegenerateBoxWarning, DimensionError, ShortfallWarning


@dataclass
class NavigatorConfig:
    levels: int = 3
    anchor_scales: list = field(default_factory=lambda: [24, 48, 64])
    grids: list = field(default_factory=lambda: [4, 2, 1])
    parts: int = 4
    iou_threshold: float = 0.25
    ranking_loss: bool = True
    ranking_weight: float = 1.0
    detach_features: bool = True  # keep ranking gradients out of the shared backbone

    def validate(self):
        if not self.levels == len(self.anchor_scales) == len(self.grids):
            raise ConfigurationError(
                f"navigator.levels={self.levels} must equal the number of anchor scales "
                f"({len(self.anchor_scales)}) and grids ({len(self.grids)})")
        if not 0.0 < self.iou_threshold < 1.0:
            raise ConfigurationError(f"navigator.iou_threshold must lie in (0, 1), got {self.iou_threshold}")
        if self.parts < 1 or self.parts > sum(g * g for g in self.grids):
            raise ConfigurationError(
                f"navigator.parts={self.parts} must lie in [1, {sum(g * g for g in self.grids)}]")


@dataclass
class PartProposal:
    box: tuple
    score: float
    anchor_index: int


def anchor_boxes(grids, scales, resolution):
    """Square anchors, one per cell per level, clipped to the image.

    Levels are flattened one after another, row-major within a level, which
    matches the order of the score vector.
    """
    out = []
    for g, s in zip(grids, scales):
        step = resolution / g
        centers = (np.arange(g) + 0.5) * step
        cy, cx = np.meshgrid(centers, centers, indexing="ij")
        cx, cy = cx.ravel(), cy.ravel()
        half = s / 2.0
        out.append(np.stack([cx - half, cy - half, cx + half, cy + half], axis=1))
    return np.clip(np.concatenate(out), 0.0, float(resolution))


def nms_top_n(scores, boxes, iou_threshold, n):
    """Greedy NMS returning up to ``n`` proposals in descending score order.

    Emits :class:`ShortfallWarning` when fewer than ``n`` boxes survive.
    """
    scores = np.asarray(scores, dtype=np.float64)
    boxes = np.asarray(boxes, dtype=np.float64)
    keep = kernels.nms(boxes, scores, iou_threshold, n)
    if len(keep) < n:
        warnings.warn(ShortfallWarning(f"NMS kept {len(keep)} of {n} requested boxes", len(keep)),
                      stacklevel=2)
    return [PartProposal(tuple(boxes[i]), float(scores[i]), int(i)) for i in keep]


def sae(f_m, f_next, omega, psi):
    """Scale-aware enhancement between adjacent pyramid levels.

    ``gate = omega(f_m) * sigmoid(omega(GAP(f_next)))``; the gate is removed
    from the larger map and, after ``psi`` (stride-2 3x3), added to the
    smaller one. Returns ``(f_m', f_next', gate)``.
    """
    if f_m.shape[1] != f_next.shape[1]:
        raise DimensionError(
            f"SAE channel axis (1) differs: {f_m.shape[1]} vs {f_next.shape[1]}")
    b, c = f_next.shape[:2]
    pooled = T.reshape(T.pool_global(f_next, "avg"), (b, c, 1, 1))
    gate = omega(f_m) * T.sigmoid(omega(pooled))
    moved = psi(gate)
    if moved.shape != f_next.shape:
        raise DimensionError(f"psi output {moved.shape} does not match the smaller level {f_next.shape}")
    return f_m - gate, f_next + moved, gate


def sae_chain(levels, blocks):
    """Run SAE over adjacent pairs, carrying the updated smaller map forward."""
    fs = list(levels)
    if len(fs) == 1:
        return fs
    out = []
    for m, block in enumerate(blocks):
        a, b, _ = sae(fs[m], fs[m + 1], block.omega, block.psi)
        out.append(a)
        if m == len(blocks) - 1:
            out.append(b)
        else:
            fs[m + 1] = b
    return out


class SaeBlock(nn.Module):
    def __init__(self, rng, channels):
        self.omega = nn.Conv2d(rng, channels, channels, 1)
        self.psi = nn.Conv2d(rng, channels, channels, 3, stride=2)


def _axis_weights(lo, hi, out_size, src_size):
    """Bilinear sampling matrix ``[out_size, src_size]`` with half-pixel centres."""
    pos = lo + (np.arange(out_size) + 0.5) * ((hi - lo) / out_size) - 0.5
    pos = np.clip(pos, 0.0, src_size - 1.0)
    i0 = np.floor(pos).astype(np.int64)
    frac = pos - i0
    i1 = np.minimum(i0 + 1, src_size - 1)
    w = np.zeros((out_size, src_size))
    rows = np.arange(out_size)
    np.add.at(w, (rows, i0), 1.0 - frac)
    np.add.at(w, (rows, i1), frac)
    return w


def _widen(lo, hi, size):
    if hi - lo >= 2.0:
        return lo, hi
    warnings.warn(DegenerateBoxWarning(f"box extent [{lo}, {hi}] widened to 2 pixels"), stacklevel=3)
    mid = min(max((lo + hi) / 2.0, 1.0), size - 1.0)
    return mid - 1.0, mid + 1.0


def crop_resize(image, boxes, out_size=None):
    """Bilinearly crop ``boxes`` ``[B, N, 4]`` out of ``image`` ``[B, 3, R, R]``.

    Output is ``[B*N, 3, out, out]`` (part index fastest), default ``out = R/2``.
    Differentiable w.r.t. pixel values.
    """
    image = T.as_tensor(image)
    b, ch, r, _ = image.shape
    out = out_size or r // 2
    boxes = np.asarray(boxes, dtype=np.float64)
    if boxes.ndim == 2:
        boxes = boxes[None]
    n = boxes.shape[1]
    ry = np.empty((b, n, out, r))
    rx = np.empty((b, n, out, r))
    for i in range(b):
        for j in range(n):
            x0, y0, x1, y1 = np.clip(boxes[i, j], 0.0, float(r))
            x0, x1 = _widen(x0, x1, r)
            y0, y1 = _widen(y0, y1, r)
            ry[i, j] = _axis_weights(y0, y1, out, r)
            rx[i, j] = _axis_weights(x0, x1, out, r)
    img = T.reshape(image, (b, 1, ch, r, r))
    rows = T.matmul(T.Tensor(ry[:, :, None]), img)
    parts = T.matmul(rows, T.Tensor(np.swapaxes(rx, -1, -2)[:, :, None]))
    return T.reshape(parts, (b * n, ch, out, out))


def ranking_loss(scores, confidences):
    """Pairwise hinge ``max(0, 1 - (s_i - s_j))`` over pairs with ``conf_i > conf_j``.

    ``scores`` is ``[B, N]`` (or ``[N]``); the loss is summed over pairs and
    averaged over the batch.
    """
    scores = T.as_tensor(scores)
    conf = np.asarray(confidences, dtype=np.float64)
    if scores.ndim == 1:
        scores = T.reshape(scores, (1, -1))
        conf = conf[None]
    b, n = scores.shape
    diff = T.reshape(scores, (b, n, 1)) - T.reshape(scores, (b, 1, n))
    ordered = conf[:, :, None] > conf[:, None, :]
    hinge = T.relu(1.0 - diff) * ordered
    return T.tsum(hinge) * (1.0 / b)


def write_proposals(path, proposals, image_ids=None):
    """Write ``image_id x_min y_min x_max y_max score`` lines."""
    with open(path, "w") as fh:
        for k, props in enumerate(proposals):
            iid = k if image_ids is None else image_ids[k]
            for p in props:
                x0, y0, x1, y1 = p.box
                fh.write(f"{iid} {x0:.2f} {y0:.2f} {x1:.2f} {y1:.2f} {p.score:.6f}\n")


def read_proposals(path):
    out = []
    with open(path) as fh:
        for line in fh:
            iid, *vals = line.split()
            out.append((iid, *map(float, vals)))
    return out


class PartNavigator(nn.Module):
    """Scores anchors on the last-stage map and selects the top-N parts per image."""

    def __init__(self, config, channels, resolution, rng):
        config.validate()
        self.config = config
        self.resolution = resolution
        self.pyramid = nn.ModuleList(
            [nn.ConvBlock(rng, channels, channels, 3, stride=1 if m == 0 else 2)
             for m in range(config.levels)])
        self.sae_blocks = nn.ModuleList([SaeBlock(rng, channels) for _ in range(config.levels - 1)])
        self.scorers = nn.ModuleList([nn.Conv2d(rng, channels, 1, 1) for _ in range(config.levels)])
        self.anchors = anchor_boxes(config.grids, config.anchor_scales, resolution)

    @property
    def num_anchors(self):
        return len(self.anchors)

    def build_pyramid(self, F):
        if F.shape[2] < min(self.config.grids):
            raise ConfigurationError(
                f"feature map extent {F.shape[2]} is below the smallest grid {min(self.config.grids)}")
        levels, x = [], F
        for block, g in zip(self.pyramid, self.config.grids):
            x = block(x)
            if x.shape[2] != g or x.shape[3] != g:
                raise ConfigurationError(
                    f"pyramid level has extent {x.shape[2:]} but grid {g} was configured")
            levels.append(x)
        return levels

    def score_anchors(self, levels):
        b = levels[0].shape[0]
        flat = [T.reshape(s(f), (b, -1)) for s, f in zip(self.scorers, levels)]
        return T.concat(flat, axis=1)

    def forward(self, F):
        """Return ``(scores [B, anchors], proposals per image, indices [B, N])``."""
        instrument.hit("navigator")
        if self.config.detach_features:
            F = T.stop_gradient(F)
        scores = self.score_anchors(sae_chain(self.build_pyramid(F), self.sae_blocks))
        n = self.config.parts
        proposals, idx = [], np.empty((scores.shape[0], n), dtype=np.int64)
        for i, row in enumerate(scores.data):
            props = nms_top_n(row, self.anchors, self.config.iou_threshold, n)
            props = props + [props[-1]] * (n - len(props))
            proposals.append(props)
            idx[i] = [p.anchor_index for p in props]
        return scores, proposals, idx

    def boxes(self, idx):
        return self.anchors[idx]
