# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: im2col/col2im for convolution and greedy NMS."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def im2col(double[:, :, :, ::1] xp, Py_ssize_t kh, Py_ssize_t kw,
           Py_ssize_t sh, Py_ssize_t sw):
    cdef Py_ssize_t b = xp.shape[0], c = xp.shape[1]
    cdef Py_ssize_t ho = (xp.shape[2] - kh) // sh + 1
    cdef Py_ssize_t wo = (xp.shape[3] - kw) // sw + 1
    out_arr = np.empty((b, c, kh, kw, ho, wo), dtype=np.float64)
    cdef double[:, :, :, :, :, ::1] out = out_arr
    cdef Py_ssize_t n, ch, i, j, y, x
    with nogil:
        for n in range(b):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        for y in range(ho):
                            for x in range(wo):
                                out[n, ch, i, j, y, x] = xp[n, ch, i + y * sh, j + x * sw]
    return out_arr


def col2im(double[:, :, :, :, :, ::1] cols, Py_ssize_t hp, Py_ssize_t wp,
           Py_ssize_t sh, Py_ssize_t sw):
    cdef Py_ssize_t b = cols.shape[0], c = cols.shape[1]
    cdef Py_ssize_t kh = cols.shape[2], kw = cols.shape[3]
    cdef Py_ssize_t ho = cols.shape[4], wo = cols.shape[5]
    out_arr = np.zeros((b, c, hp, wp), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t n, ch, i, j, y, x
    with nogil:
        for n in range(b):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        for y in range(ho):
                            for x in range(wo):
                                out[n, ch, i + y * sh, j + x * sw] += cols[n, ch, i, j, y, x]
    return out_arr


def nms(boxes, scores, double thresh, Py_ssize_t limit):
    cdef double[:, ::1] bx = np.ascontiguousarray(boxes, dtype=np.float64)
    cdef cnp.int64_t[::1] order = np.argsort(
        -np.asarray(scores, dtype=np.float64), kind="stable").astype(np.int64)
    cdef Py_ssize_t n = bx.shape[0]
    keep_arr = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[::1] keep = keep_arr
    cdef unsigned char[::1] dead = np.zeros(n, dtype=np.uint8)
    cdef Py_ssize_t a, k, i, j, nkeep = 0
    cdef double ai, iw, ih, inter, union
    with nogil:
        for a in range(n):
            if limit >= 0 and nkeep >= limit:
                break
            i = order[a]
            if dead[i]:
                continue
            keep[nkeep] = i
            nkeep += 1
            ai = (bx[i, 2] - bx[i, 0]) * (bx[i, 3] - bx[i, 1])
            for k in range(a + 1, n):
                j = order[k]
                if dead[j]:
                    continue
                iw = min(bx[i, 2], bx[j, 2]) - max(bx[i, 0], bx[j, 0])
                ih = min(bx[i, 3], bx[j, 3]) - max(bx[i, 1], bx[j, 1])
                if iw <= 0.0 or ih <= 0.0:
                    continue
                inter = iw * ih
                union = ai + (bx[j, 2] - bx[j, 0]) * (bx[j, 3] - bx[j, 1]) - inter
                if union > 0.0 and inter / union > thresh:
                    dead[j] = 1
    return keep_arr[:nkeep].copy()
