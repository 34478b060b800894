"""Bowyer-Watson Delaunay triangulation with filtered exact predicates."""

from __future__ import annotations

from fractions import Fraction

import numpy as np

_FILTER = 1e-10


def orient(a, b, c) -> int:
    """Sign of the signed area of (a, b, c): +1 counter-clockwise, -1 clockwise, 0 collinear."""
    l = (b[0] - a[0]) * (c[1] - a[1])
    r = (b[1] - a[1]) * (c[0] - a[0])
    det = l - r
    if abs(det) > _FILTER * (abs(l) + abs(r)):
        return 1 if det > 0 else -1
    fa = [Fraction(v) for v in (*a, *b, *c)]
    det = (fa[2] - fa[0]) * (fa[5] - fa[1]) - (fa[3] - fa[1]) * (fa[4] - fa[0])
    return (det > 0) - (det < 0)


def incircle(a, b, c, d) -> int:
    """+1 if d lies strictly inside the circumcircle of counter-clockwise (a, b, c)."""
    adx, ady = a[0] - d[0], a[1] - d[1]
    bdx, bdy = b[0] - d[0], b[1] - d[1]
    cdx, cdy = c[0] - d[0], c[1] - d[1]
    alift, blift, clift = adx * adx + ady * ady, bdx * bdx + bdy * bdy, cdx * cdx + cdy * cdy
    bc, ca, ab = bdx * cdy - cdx * bdy, cdx * ady - adx * cdy, adx * bdy - bdx * ady
    det = alift * bc + blift * ca + clift * ab
    perm = (alift * (abs(bdx * cdy) + abs(cdx * bdy))
            + blift * (abs(cdx * ady) + abs(adx * cdy))
            + clift * (abs(adx * bdy) + abs(bdx * ady)))
    if abs(det) > _FILTER * perm:
        return 1 if det > 0 else -1
    ax, ay, bx, by, cx, cy, dx, dy = (Fraction(v) for v in (*a, *b, *c, *d))
    adx, ady, bdx, bdy, cdx, cdy = ax - dx, ay - dy, bx - dx, by - dy, cx - dx, cy - dy
    det = ((adx * adx + ady * ady) * (bdx * cdy - cdx * bdy)
           + (bdx * bdx + bdy * bdy) * (cdx * ady - adx * cdy)
           + (cdx * cdx + cdy * cdy) * (adx * bdy - bdx * ady))
    return (det > 0) - (det < 0)


def merge_duplicates(points, tol: float = 1e-9):
    """Collapse points closer than ``tol``; return (unique points, index map)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    unique: list[tuple[float, float]] = []
    index = np.empty(len(pts), dtype=np.int64)
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    for i in order:
        p = pts[i]
        hit = -1
        # candidates within tol in x are contiguous at the tail of ``unique``
        for j in range(len(unique) - 1, -1, -1):
            u = unique[j]
            if p[0] - u[0] > tol:
                break
            if abs(p[1] - u[1]) <= tol:
                hit = j
                break
        if hit < 0:
            unique.append((float(p[0]), float(p[1])))
            hit = len(unique) - 1
        index[i] = hit
    return np.array(unique).reshape(-1, 2), index


def convex_hull(points, keep_collinear: bool = False) -> list[int]:
    """Andrew's monotone chain; counter-clockwise vertex indices.

    Points lying on a hull edge are dropped unless ``keep_collinear`` is set.
    """
    pts = [tuple(p) for p in np.asarray(points, dtype=np.float64)]
    order = sorted(range(len(pts)), key=lambda i: pts[i])
    cut = 0 if keep_collinear else 1
    if len(order) < 3:
        return order

    def chain(seq):
        out = []
        for i in seq:
            while len(out) >= 2 and orient(pts[out[-2]], pts[out[-1]], pts[i]) < cut:
                out.pop()
            out.append(i)
        return out

    lower, upper = chain(order), chain(order[::-1])
    return lower[:-1] + upper[:-1]


def _bowyer_watson(pts: list, scale: float):
    n = len(pts)
    xs = [p[0] for p in pts]
    ys = [p[1] for p in pts]
    cx, cy = (min(xs) + max(xs)) / 2, (min(ys) + max(ys)) / 2
    span = max(max(xs) - min(xs), max(ys) - min(ys), 1.0) * scale
    verts = pts + [(cx - 2 * span, cy - span), (cx + 2 * span, cy - span), (cx, cy + 2 * span)]
    tris = {(n, n + 1, n + 2)}
    for i in range(n):
        p = verts[i]
        bad = [t for t in tris if incircle(verts[t[0]], verts[t[1]], verts[t[2]], p) > 0]
        edges = {}
        for t in bad:
            for e in ((t[0], t[1]), (t[1], t[2]), (t[2], t[0])):
                key = (min(e), max(e))
                edges[key] = None if key in edges else e
        tris.difference_update(bad)
        for e in edges.values():
            if e is not None:
                tris.add((e[0], e[1], i))
    return [t for t in tris if max(t) < n]


def triangulate(points) -> list[tuple[int, int, int]]:
    """Delaunay triangles (counter-clockwise index triples) of distinct points.

    Returns an empty list for fewer than three points or a collinear set.
    """
    pts = [(float(x), float(y)) for x, y in np.asarray(points, dtype=np.float64).reshape(-1, 2)]
    if len(pts) < 3:
        return []
    if len(convex_hull(pts)) < 3:
        return []
    hull = convex_hull(pts, keep_collinear=True)
    hull_edges = {(min(a, b), max(a, b)) for a, b in zip(hull, hull[1:] + hull[:1])}
    expected = 2 * len(pts) - 2 - len(hull)
    scale = 1e3
    for _ in range(6):
        tris = _bowyer_watson(pts, scale)
        # a finite enclosing triangle can occasionally swallow a hull edge
        if len(tris) == expected and hull_edges <= edges_of(tris):
            return sorted(tuple(_canonical(t)) for t in tris)
        scale *= 1e3
    raise RuntimeError("Delaunay triangulation failed to recover the convex hull")


def _canonical(t):
    k = t.index(min(t))
    return t[k:] + t[:k]


def edges_of(tris) -> set[tuple[int, int]]:
    out = set()
    for a, b, c in tris:
        for u, v in ((a, b), (b, c), (c, a)):
            out.add((min(u, v), max(u, v)))
    return out


def neighbor_distances(points, tris):
    """Per vertex: (min, max, mean) Delaunay edge length and degree."""
    pts = np.asarray(points, dtype=np.float64)
    nbrs: list[set[int]] = [set() for _ in range(len(pts))]
    for u, v in edges_of(tris):
        nbrs[u].add(v)
        nbrs[v].add(u)
    out = np.zeros((len(pts), 4))
    for i, ns in enumerate(nbrs):
        if ns:
            d = np.linalg.norm(pts[sorted(ns)] - pts[i], axis=1)
            out[i] = d.min(), d.max(), d.mean(), len(ns)
    return out
