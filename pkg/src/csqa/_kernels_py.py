"""Numpy implementations of the hot kernels.

These are the reference fallbacks for ``_ckernels``; both modules expose the
same three functions with identical semantics.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(xp, kh, kw, sh, sw):
    """Unfold a padded batch ``[B, C, Hp, Wp]`` into ``[B, C, kh, kw, Ho, Wo]``."""
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3))


def col2im(cols, hp, wp, sh, sw):
    """Adjoint of :func:`im2col`: scatter-add columns back onto the padded grid."""
    b, c, kh, kw, ho, wo = cols.shape
    out = np.zeros((b, c, hp, wp), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw] += cols[:, :, i, j]
    return out


def nms(boxes, scores, thresh, limit):
    """Greedy NMS; returns kept indices in descending score order.

    Ties in score are broken by the lower index. A box is suppressed when its
    IoU with an already kept box is strictly greater than ``thresh``. At most
    ``limit`` indices are returned (``limit < 0`` means no limit).
    """
    boxes = np.asarray(boxes, dtype=np.float64)
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    x1, y1, x2, y2 = boxes.T
    areas = (x2 - x1) * (y2 - y1)
    keep = []
    while order.size and (limit < 0 or len(keep) < limit):
        i = order[0]
        keep.append(i)
        rest = order[1:]
        iw = np.minimum(x2[i], x2[rest]) - np.maximum(x1[i], x1[rest])
        ih = np.minimum(y2[i], y2[rest]) - np.maximum(y1[i], y1[rest])
        inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
        union = areas[i] + areas[rest] - inter
        iou = np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)
        order = rest[iou <= thresh]
    return np.asarray(keep, dtype=np.int64)
