"""Slow, independent reference implementations used as test oracles."""

from __future__ import annotations

import itertools
import math

import numpy as np


def point_segment_sq(p, a, b):
    ab = b - a
    denom = float(ab @ ab)
    t = 0.0 if denom == 0 else min(1.0, max(0.0, float((p - a) @ ab) / denom))
    d = p - (a + t * ab)
    return float(d @ d)


def point_triangle_dist(p, a, b, c):
    """Distance by plane projection plus edge fallback (not the Voronoi-region method)."""
    p, a, b, c = (np.asarray(x, dtype=np.float64) for x in (p, a, b, c))
    n = np.cross(b - a, c - a)
    nn = float(n @ n)
    best = min(point_segment_sq(p, a, b), point_segment_sq(p, b, c), point_segment_sq(p, c, a))
    if nn > 0:
        q = p - (float((p - a) @ n) / nn) * n
        # barycentric via sub-areas
        w0 = np.cross(b - q, c - q) @ n
        w1 = np.cross(c - q, a - q) @ n
        w2 = np.cross(a - q, b - q) @ n
        if w0 >= 0 and w1 >= 0 and w2 >= 0:
            d = p - q
            best = min(best, float(d @ d))
    return math.sqrt(best)


def point_mesh_dist(p, vertices, triangles):
    return min(point_triangle_dist(p, *vertices[t]) for t in triangles)


def brute_nearest(points, q):
    """Lowest index among the exact minimizers of Euclidean distance."""
    best_i, best_d = -1, math.inf
    for i, x in enumerate(points):
        d = math.sqrt(sum((float(x[k]) - float(q[k])) ** 2 for k in range(3)))
        if d < best_d:
            best_i, best_d = i, d
    return best_i, best_d


def brute_chamfer(a, b):
    def one(x, y):
        total = 0.0
        for p in x:
            diff = y - p
            total += np.min(np.sum(diff * diff, axis=1))
        return total / len(x)
    return one(a, b) + one(b, a)


def _seg_tri(p, q, a, b, c, eps=1e-12):
    """Proper crossing of segment ``pq`` through the interior of triangle ``abc``.

    Solves p + s (q - p) = a + u (b - a) + v (c - a); the crossing must be strictly
    inside both, and the endpoints strictly off the plane, with relative tolerances.
    """
    M = np.column_stack([q - p, -(b - a), -(c - a)])
    scale = np.linalg.norm(q - p) * np.linalg.norm(b - a) * np.linalg.norm(c - a)
    if abs(np.linalg.det(M)) <= 1e-12 * scale:
        return False  # parallel or coplanar: degenerate
    s, u, v = np.linalg.solve(M, a - p)
    n = np.cross(b - a, c - a)
    n /= np.linalg.norm(n)
    tol = eps * (np.linalg.norm(q - p) + np.linalg.norm(b - a) + np.linalg.norm(c - a))
    off_plane = abs(n @ (p - a)) > tol and abs(n @ (q - a)) > tol
    return off_plane and 0 < s < 1 and u > eps and v > eps and 1 - u - v > eps


def tri_tri(t1, t2):
    """Generic-position triangle intersection: some edge of one pierces the other."""
    for (x, y, z), (a, b, c) in ((t1, t2), (t2, t1)):
        for p, q in ((x, y), (y, z), (z, x)):
            if _seg_tri(p, q, a, b, c):
                return True
    return False


def brute_intersections(vertices, triangles):
    count = 0
    for i, j in itertools.combinations(range(len(triangles)), 2):
        if set(triangles[i].tolist()) & set(triangles[j].tolist()):
            continue
        if tri_tri(vertices[triangles[i]], vertices[triangles[j]]):
            count += 1
    return count


def dense_transfer(vertices, links, assignment, targets, rotations, lam):
    """Minimize the transfer energy by dense least squares on the stacked residuals."""
    n = len(vertices)
    rows, rhs = [], []
    for i, s in enumerate(assignment):
        r = np.zeros(n)
        r[np.asarray(s)] = 1.0 / len(s)
        rows.append(r)
        rhs.append(targets[i])
    w = math.sqrt(lam)
    for i, j in links:
        i, j = min(i, j), max(i, j)
        r = np.zeros(n)
        r[i], r[j] = w, -w
        rows.append(r)
        rhs.append(w * rotations[i] @ (vertices[i] - vertices[j]))
    A = np.array(rows)
    B = np.array(rhs)
    return np.linalg.lstsq(A, B, rcond=None)[0]


def lattice_count(corners, direction, spacing, margin):
    """Count lattice points strictly inside a triangle and ``margin`` away from its sides."""
    a, b, c = (np.asarray(x, dtype=np.float64) for x in corners)
    n = np.cross(b - a, c - a)
    n /= np.linalg.norm(n)
    ex = np.asarray(direction, dtype=np.float64)
    ey = np.cross(n, ex)
    pts2 = [np.array([(x - a) @ ex, (x - a) @ ey]) for x in (a, b, c)]
    lo = np.min(pts2, axis=0)
    hi = np.max(pts2, axis=0)
    count = 0
    for i in range(int(math.floor(lo[0] / spacing)) - 1, int(math.ceil(hi[0] / spacing)) + 2):
        for j in range(int(math.floor(lo[1] / spacing)) - 1, int(math.ceil(hi[1] / spacing)) + 2):
            q = np.array([i * spacing, j * spacing])
            ok = True
            for k in range(3):
                u, v = pts2[k], pts2[(k + 1) % 3]
                e = v - u
                # signed distance to the side, positive inside (triangle is counter-clockwise in 2D)
                sd = (e[0] * (q[1] - u[1]) - e[1] * (q[0] - u[0])) / np.linalg.norm(e)
                if sd <= margin:
                    ok = False
                    break
            count += ok
    return count


def _side_distance(u, v, q):
    e = v - u
    return (e[0] * (q[1] - u[1]) - e[1] * (q[0] - u[0])) / math.hypot(e[0], e[1])


def reference_patch_vertex_count(corners, direction, theta_l, spacing, margin, max_rounds=64):
    """Vertex count of one subdivided triangle: segment points, lattice points, then
    unconstrained Delaunay (the patch is convex, so it coincides with the constrained
    one) with midpoints of interior edges longer than ``theta_l`` added until none remain."""
    from scipy.spatial import Delaunay

    a, b, c = (np.asarray(x, dtype=np.float64) for x in corners)
    n = np.cross(b - a, c - a)
    n /= np.linalg.norm(n)
    ex = np.asarray(direction, dtype=np.float64)
    ey = np.cross(n, ex)
    boundary = []
    for p, q in ((a, b), (b, c), (c, a)):
        k = max(1, math.ceil(np.linalg.norm(q - p) / theta_l))
        # an exact multiple of theta_l can leave a rounded segment one ulp too long
        while max(np.linalg.norm((p + (q - p) * (i + 1) / k) - (p + (q - p) * i / k)) for i in range(k)) > theta_l:
            k += 1
        boundary.extend(p + (q - p) * i / k for i in range(k))
    pts = [np.array([(x - a) @ ex, (x - a) @ ey]) for x in boundary]
    nb = len(pts)
    corners2 = pts[0], np.array([(b - a) @ ex, (b - a) @ ey]), np.array([(c - a) @ ex, (c - a) @ ey])
    lo, hi = np.min(corners2, axis=0), np.max(corners2, axis=0)
    for i in range(int(math.floor(lo[0] / spacing)) - 1, int(math.ceil(hi[0] / spacing)) + 2):
        for j in range(int(math.floor(lo[1] / spacing)) - 1, int(math.ceil(hi[1] / spacing)) + 2):
            q = np.array([i * spacing, j * spacing])
            if all(_side_distance(corners2[k], corners2[(k + 1) % 3], q) > margin for k in range(3)):
                pts.append(q)
    pts = np.array(pts)
    for _ in range(max_rounds):
        tri = Delaunay(pts).simplices
        # qhull emits flat slivers along runs of collinear hull points; they are not triangles
        u, w = pts[tri[:, 1]] - pts[tri[:, 0]], pts[tri[:, 2]] - pts[tri[:, 0]]
        tri = tri[np.abs(u[:, 0] * w[:, 1] - u[:, 1] * w[:, 0]) > 1e-14]
        edges = {tuple(sorted((int(s[u]), int(s[(u + 1) % 3])))) for s in tri for u in range(3)}
        long_edges = [
            (i, j) for i, j in edges
            if np.linalg.norm(pts[i] - pts[j]) > theta_l
            and not (j < nb and (j - i == 1 or (i == 0 and j == nb - 1)))
        ]
        if not long_edges:
            return len(pts)
        pts = np.concatenate([pts, [0.5 * (pts[i] + pts[j]) for i, j in sorted(long_edges)]])
    raise RuntimeError("refinement did not terminate")


def rotation_matrix(angles):
    """Rz(c) Ry(b) Rx(a) via scipy's extrinsic x-y-z convention."""
    from scipy.spatial.transform import Rotation
    return Rotation.from_euler("xyz", np.asarray(angles, dtype=np.float64)).as_matrix()


def brute_backward(targets, sources):
    total = 0.0
    for t in targets:
        total += min(float(np.sum((s - t) ** 2)) for s in sources)
    return total


def brute_rigidity(x, v, edges, angles):
    total = 0.0
    for a, b in edges:
        i, j = min(a, b), max(a, b)
        r = (x[i] - x[j]) - rotation_matrix(angles[i]) @ (v[i] - v[j])
        total += float(r @ r)
    return total


def central_difference(f, x, h=1e-5):
    """Central-difference gradient of scalar ``f`` at array ``x`` (any shape)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + h
        fp = f(x)
        flat[k] = old - h
        fm = f(x)
        flat[k] = old
        gf[k] = (fp - fm) / (2 * h)
    return g


def relative_error(analytic, numeric):
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / scale)


def euler_integrate(field, x, steps):
    """Plain forward Euler over t in [0, 1]; ``field(p, t)`` acts on numpy arrays."""
    p = np.array(x, dtype=np.float64)
    h = 1.0 / steps
    for k in range(steps):
        p = p + h * field(p, k * h)
    return p


def euler_richardson(field, x, steps):
    """Euler at ``steps`` and ``steps // 2`` combined to cancel the first-order error term."""
    return 2.0 * euler_integrate(field, x, steps) - euler_integrate(field, x, steps // 2)


def _seg_tri_many(p, q, a, b, c, eps=1e-12):
    """Vectorized :func:`_seg_tri` over rows, solving the 3x3 system by Cramer's rule."""
    d, e1, e2, r = q - p, b - a, c - a, a - p
    n = np.cross(e1, e2)
    det = np.einsum("ij,ij->i", d, n)
    ld, l1, l2 = (np.linalg.norm(x, axis=1) for x in (d, e1, e2))
    ok = np.abs(det) > 1e-12 * ld * l1 * l2
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.einsum("ij,ij->i", r, n) / det
        u = -np.einsum("ij,ij->i", d, np.cross(r, e2)) / det
        v = -np.einsum("ij,ij->i", d, np.cross(e1, r)) / det
        nn = n / np.linalg.norm(n, axis=1)[:, None]
    tol = eps * (ld + l1 + l2)
    off = (np.abs(np.einsum("ij,ij->i", nn, p - a)) > tol) & (np.abs(np.einsum("ij,ij->i", nn, q - a)) > tol)
    return ok & off & (s > 0) & (s < 1) & (u > eps) & (v > eps) & (1 - u - v > eps)


def brute_intersections_fast(vertices, triangles):
    """All-pairs count with the same predicate as :func:`brute_intersections`, one row of pairs at a time."""
    v, t = np.asarray(vertices, float), np.asarray(triangles)
    count = 0
    for i in range(len(t) - 1):
        j = np.arange(i + 1, len(t))
        j = j[~np.isin(t[j], t[i]).any(axis=1)]
        if not len(j):
            continue
        mine = np.broadcast_to(v[t[i]], (len(j), 3, 3))
        other = v[t[j]]
        hit = np.zeros(len(j), dtype=bool)
        for x, y in ((mine, other), (other, mine)):
            for k in range(3):
                hit |= _seg_tri_many(x[:, k], x[:, (k + 1) % 3], y[:, 0], y[:, 1], y[:, 2])
        count += int(hit.sum())
    return count
