"""Axis-aligned bounding volume hierarchy over triangles, with numba kernels.

Only used as an accelerator: every query here has an all-pairs or
all-triangles counterpart with identical results.
"""

from __future__ import annotations

import os

import numba as nb
import numpy as np

if "NUMBA_THREADING_LAYER" not in os.environ:
    # the system TBB is too old for numba; avoid the probe and its warning
    nb.config.THREADING_LAYER = "workqueue"

LEAF_SIZE = 4


class TriangleBVH:
    """Median-split BVH over the triangles ``vertices[triangles]``."""

    def __init__(self, vertices: np.ndarray, triangles: np.ndarray):
        self.vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        self.triangles = np.ascontiguousarray(triangles, dtype=np.int64)
        corners = self.vertices[self.triangles]
        lo = corners.min(axis=1)
        hi = corners.max(axis=1)
        cent = 0.5 * (lo + hi)
        n = len(self.triangles)

        node_lo, node_hi, left, right, start, count = [], [], [], [], [], []
        order = np.arange(n)
        stack = [(0, n, -1, False)]
        while stack:
            s, e, parent, is_right = stack.pop()
            idx = len(node_lo)
            if parent >= 0:
                (right if is_right else left)[parent] = idx
            prims = order[s:e]
            node_lo.append(lo[prims].min(axis=0) if e > s else np.zeros(3))
            node_hi.append(hi[prims].max(axis=0) if e > s else np.zeros(3))
            left.append(-1)
            right.append(-1)
            start.append(s)
            count.append(e - s)
            if e - s <= LEAF_SIZE:
                continue
            c = cent[prims]
            axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
            mid = (e - s) // 2
            part = np.argpartition(c[:, axis], mid, kind="introselect")
            order[s:e] = prims[part]
            count[idx] = 0
            stack.append((s + mid, e, idx, True))
            stack.append((s, s + mid, idx, False))

        self.node_lo = np.asarray(node_lo, dtype=np.float64).reshape(-1, 3)
        self.node_hi = np.asarray(node_hi, dtype=np.float64).reshape(-1, 3)
        self.left = np.asarray(left, dtype=np.int64)
        self.right = np.asarray(right, dtype=np.int64)
        self.start = np.asarray(start, dtype=np.int64)
        self.count = np.asarray(count, dtype=np.int64)
        self.order = order.astype(np.int64)

    def nearest_sq_distance(self, points: np.ndarray) -> np.ndarray:
        pts = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
        return _nearest_sq(pts, self.vertices, self.triangles, self.node_lo, self.node_hi,
                           self.left, self.right, self.start, self.count, self.order)

    def intersecting_pairs(self) -> np.ndarray:
        args = (self.vertices, self.triangles, self.node_lo, self.node_hi,
                self.left, self.right, self.start, self.count, self.order)
        counts = _pair_counts(*args)
        offsets = np.zeros(len(counts) + 1, dtype=np.int64)
        np.cumsum(counts, out=offsets[1:])
        out = np.empty((offsets[-1], 2), dtype=np.int64)
        _pair_fill(*args, offsets, out)
        return out


# --------------------------------------------------------------------------
# point to triangle


@nb.njit(cache=True, inline="always")
def _dot(a0, a1, a2, b0, b1, b2):
    return a0 * b0 + a1 * b1 + a2 * b2


@nb.njit(cache=True)
def point_triangle_sq(p, a, b, c):
    """Squared distance from ``p`` to triangle ``abc`` (closest-feature regions)."""
    ab0, ab1, ab2 = b[0] - a[0], b[1] - a[1], b[2] - a[2]
    ac0, ac1, ac2 = c[0] - a[0], c[1] - a[1], c[2] - a[2]
    ap0, ap1, ap2 = p[0] - a[0], p[1] - a[1], p[2] - a[2]
    d1 = _dot(ab0, ab1, ab2, ap0, ap1, ap2)
    d2 = _dot(ac0, ac1, ac2, ap0, ap1, ap2)
    if d1 <= 0.0 and d2 <= 0.0:
        return _dot(ap0, ap1, ap2, ap0, ap1, ap2)
    bp0, bp1, bp2 = p[0] - b[0], p[1] - b[1], p[2] - b[2]
    d3 = _dot(ab0, ab1, ab2, bp0, bp1, bp2)
    d4 = _dot(ac0, ac1, ac2, bp0, bp1, bp2)
    if d3 >= 0.0 and d4 <= d3:
        return _dot(bp0, bp1, bp2, bp0, bp1, bp2)
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        t = d1 / (d1 - d3)
        q0, q1, q2 = ap0 - t * ab0, ap1 - t * ab1, ap2 - t * ab2
        return q0 * q0 + q1 * q1 + q2 * q2
    cp0, cp1, cp2 = p[0] - c[0], p[1] - c[1], p[2] - c[2]
    d5 = _dot(ab0, ab1, ab2, cp0, cp1, cp2)
    d6 = _dot(ac0, ac1, ac2, cp0, cp1, cp2)
    if d6 >= 0.0 and d5 <= d6:
        return _dot(cp0, cp1, cp2, cp0, cp1, cp2)
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        t = d2 / (d2 - d6)
        q0, q1, q2 = ap0 - t * ac0, ap1 - t * ac1, ap2 - t * ac2
        return q0 * q0 + q1 * q1 + q2 * q2
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        q0 = bp0 - t * (c[0] - b[0])
        q1 = bp1 - t * (c[1] - b[1])
        q2 = bp2 - t * (c[2] - b[2])
        return q0 * q0 + q1 * q1 + q2 * q2
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    q0 = ap0 - ab0 * v - ac0 * w
    q1 = ap1 - ab1 * v - ac1 * w
    q2 = ap2 - ab2 * v - ac2 * w
    return q0 * q0 + q1 * q1 + q2 * q2


@nb.njit(cache=True, inline="always")
def _box_sq(p, lo, hi):
    s = 0.0
    for k in range(3):
        if p[k] < lo[k]:
            d = lo[k] - p[k]
            s += d * d
        elif p[k] > hi[k]:
            d = p[k] - hi[k]
            s += d * d
    return s


@nb.njit(cache=True, parallel=True)
def _nearest_sq(points, verts, tris, nlo, nhi, left, right, start, count, order):
    out = np.empty(len(points))
    for q in nb.prange(len(points)):
        p = points[q]
        best = np.inf
        stack = np.empty(128, dtype=np.int64)
        top = 0
        stack[top] = 0
        top += 1
        while top > 0:
            top -= 1
            node = stack[top]
            if _box_sq(p, nlo[node], nhi[node]) >= best:
                continue
            if count[node] > 0:
                for k in range(start[node], start[node] + count[node]):
                    t = tris[order[k]]
                    d = point_triangle_sq(p, verts[t[0]], verts[t[1]], verts[t[2]])
                    if d < best:
                        best = d
            else:
                lc, r = left[node], right[node]
                dl = _box_sq(p, nlo[lc], nhi[lc])
                dr = _box_sq(p, nlo[r], nhi[r])
                # push the farther child first so the nearer one is expanded next
                if dl < dr:
                    stack[top] = r
                    stack[top + 1] = lc
                else:
                    stack[top] = lc
                    stack[top + 1] = r
                top += 2
        out[q] = best
    return out


# --------------------------------------------------------------------------
# triangle-triangle intersection


@nb.njit(cache=True)
def _pierces(p, q, a, b, c, eps):
    """Segment ``pq`` strictly crosses the plane of ``abc`` at a point strictly inside it.

    Tolerances are relative (distances to the plane against the summed edge
    lengths, barycentric coordinates against 1), so nearly coplanar and merely
    touching configurations are not reported.
    """
    u0, u1, u2 = b[0] - a[0], b[1] - a[1], b[2] - a[2]
    v0, v1, v2 = c[0] - a[0], c[1] - a[1], c[2] - a[2]
    n0, n1, n2 = u1 * v2 - u2 * v1, u2 * v0 - u0 * v2, u0 * v1 - u1 * v0
    nn = np.sqrt(n0 * n0 + n1 * n1 + n2 * n2)
    if nn == 0.0:
        return False
    d1 = (n0 * (p[0] - a[0]) + n1 * (p[1] - a[1]) + n2 * (p[2] - a[2])) / nn
    d2 = (n0 * (q[0] - a[0]) + n1 * (q[1] - a[1]) + n2 * (q[2] - a[2])) / nn
    w0, w1, w2 = q[0] - p[0], q[1] - p[1], q[2] - p[2]
    scale = np.sqrt(u0 * u0 + u1 * u1 + u2 * u2) + np.sqrt(v0 * v0 + v1 * v1 + v2 * v2) \
        + np.sqrt(w0 * w0 + w1 * w1 + w2 * w2)
    tol = eps * scale
    if not ((d1 > tol and d2 < -tol) or (d1 < -tol and d2 > tol)):
        return False
    t = d1 / (d1 - d2)
    x0, x1, x2 = p[0] + t * w0 - a[0], p[1] + t * w1 - a[1], p[2] + t * w2 - a[2]
    # barycentric weights of b and c from signed sub-areas along the normal
    beta = (n0 * (x1 * v2 - x2 * v1) + n1 * (x2 * v0 - x0 * v2) + n2 * (x0 * v1 - x1 * v0)) / (nn * nn)
    gamma = (n0 * (u1 * x2 - u2 * x1) + n1 * (u2 * x0 - u0 * x2) + n2 * (u0 * x1 - u1 * x0)) / (nn * nn)
    return beta > eps and gamma > eps and 1.0 - beta - gamma > eps


@nb.njit(cache=True)
def tri_tri_intersect(p0, p1, p2, q0, q1, q2, eps=1e-12):
    """True when an edge of one triangle properly pierces the interior of the other.

    Touching contacts and coplanar overlaps are degenerate and not reported.
    """
    if _pierces(p0, p1, q0, q1, q2, eps) or _pierces(p1, p2, q0, q1, q2, eps) \
            or _pierces(p2, p0, q0, q1, q2, eps):
        return True
    if _pierces(q0, q1, p0, p1, p2, eps) or _pierces(q1, q2, p0, p1, p2, eps) \
            or _pierces(q2, q0, p0, p1, p2, eps):
        return True
    return False


@nb.njit(cache=True, inline="always")
def _share_vertex(t, u):
    for a in range(3):
        for b in range(3):
            if t[a] == u[b]:
                return True
    return False


@nb.njit(cache=True, inline="always")
def _boxes_overlap(alo, ahi, blo, bhi):
    for k in range(3):
        if alo[k] > bhi[k] or blo[k] > ahi[k]:
            return False
    return True


@nb.njit(cache=True)
def _visit_pairs(i, verts, tris, nlo, nhi, left, right, start, count, order, out, offset):
    t = tris[i]
    a, b, c = verts[t[0]], verts[t[1]], verts[t[2]]
    lo = np.minimum(np.minimum(a, b), c)
    hi = np.maximum(np.maximum(a, b), c)
    found = 0
    stack = np.empty(128, dtype=np.int64)
    top = 1
    stack[0] = 0
    while top > 0:
        top -= 1
        node = stack[top]
        if not _boxes_overlap(lo, hi, nlo[node], nhi[node]):
            continue
        if count[node] > 0:
            for k in range(start[node], start[node] + count[node]):
                j = order[k]
                if j <= i:
                    continue
                u = tris[j]
                if _share_vertex(t, u):
                    continue
                if tri_tri_intersect(a, b, c, verts[u[0]], verts[u[1]], verts[u[2]]):
                    if offset >= 0:
                        out[offset + found, 0] = i
                        out[offset + found, 1] = j
                    found += 1
        else:
            stack[top] = left[node]
            stack[top + 1] = right[node]
            top += 2
    return found


@nb.njit(cache=True, parallel=True)
def _pair_counts(verts, tris, nlo, nhi, left, right, start, count, order):
    out = np.zeros(len(tris), dtype=np.int64)
    dummy = np.empty((0, 2), dtype=np.int64)
    for i in nb.prange(len(tris)):
        out[i] = _visit_pairs(i, verts, tris, nlo, nhi, left, right, start, count, order, dummy, -1)
    return out


@nb.njit(cache=True, parallel=True)
def _pair_fill(verts, tris, nlo, nhi, left, right, start, count, order, offsets, out):
    for i in nb.prange(len(tris)):
        _visit_pairs(i, verts, tris, nlo, nhi, left, right, start, count, order, out, offsets[i])
