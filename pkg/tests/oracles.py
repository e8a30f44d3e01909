"""Independent reference implementations used as test oracles.

None of these import the geometry or policy code under test; they are
written from the definitions so agreement means something.
"""
from __future__ import annotations

import math

import numpy as np


# -- geometry ------------------------------------------------------------------------------

def _on_segment(px, py, ax, ay, bx, by) -> bool:
    cross = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
    if cross != 0:
        return False
    return min(ax, bx) <= px <= max(ax, bx) and min(ay, by) <= py <= max(ay, by)


def winding_number(ring, px, py) -> int:
    """Classic winding number (Sunday's formulation)."""
    wn = 0
    n = len(ring)
    for i in range(n):
        ax, ay = ring[i]
        bx, by = ring[(i + 1) % n]
        is_left = (bx - ax) * (py - ay) - (px - ax) * (by - ay)
        if ay <= py:
            if by > py and is_left > 0:
                wn += 1
        elif by <= py and is_left < 0:
            wn -= 1
    return wn


def on_ring(ring, px, py) -> bool:
    n = len(ring)
    return any(_on_segment(px, py, *ring[i], *ring[(i + 1) % n]) for i in range(n))


def oracle_inside(exterior, holes, px, py) -> bool:
    """Boundary counts as inside; strictly inside a hole is outside."""
    if on_ring(exterior, px, py):
        return True
    if winding_number(exterior, px, py) == 0:
        return False
    for h in holes:
        if on_ring(h, px, py):
            return True
        if winding_number(h, px, py) != 0:
            return False
    return True


def _np_inside(ring, xs, ys):
    """Vectorized even-odd test; boundary has measure zero for sampling."""
    inside = np.zeros(xs.shape, dtype=bool)
    n = len(ring)
    for i in range(n):
        ax, ay = ring[i]
        bx, by = ring[(i + 1) % n]
        if ay == by:
            continue
        cond = (ay > ys) != (by > ys)
        xcross = ax + (ys - ay) * (bx - ax) / (by - ay)
        inside ^= cond & (xs < xcross)
    return inside


def np_polygon_mask(exterior, holes, xs, ys):
    m = _np_inside(exterior, xs, ys)
    for h in holes:
        m &= ~_np_inside(h, xs, ys)
    return m


def monte_carlo_area(shapes, box, n=1_000_000, seed=0):
    """Estimate the area of the intersection of ``shapes`` [(exterior, holes), ...]
    by uniform sampling over ``box``. Returns (estimate, sigma)."""
    xmin, ymin, xmax, ymax = box
    rng = np.random.default_rng(seed)
    xs = rng.uniform(xmin, xmax, n)
    ys = rng.uniform(ymin, ymax, n)
    mask = np.ones(n, dtype=bool)
    for ext, holes in shapes:
        mask &= np_polygon_mask(ext, holes, xs, ys)
    box_area = (xmax - xmin) * (ymax - ymin)
    p = mask.mean()
    return box_area * p, box_area * math.sqrt(p * (1 - p) / n)


def shoelace(ring) -> float:
    n = len(ring)
    return 0.5 * sum(ring[i][0] * ring[(i + 1) % n][1] - ring[(i + 1) % n][0] * ring[i][1] for i in range(n))


# -- raster ----------------------------------------------------------------------------------

def zonal_oracle(ncols, nrows, x0, y0, cs, nodata, cells, exterior, holes):
    """Visit every cell in row-major order; membership by cell center."""
    count, total, lo, hi = 0, 0.0, None, None
    for r in range(nrows):
        for c in range(ncols):
            v = cells[r * ncols + c]
            if v == nodata:
                continue
            cx = x0 + (c + 0.5) * cs
            cy = y0 + (nrows - r - 0.5) * cs
            if oracle_inside(exterior, holes, cx, cy):
                count += 1
                total += v
                lo = v if lo is None else min(lo, v)
                hi = v if hi is None else max(hi, v)
    return count, total, lo, hi


def quantile_breaks_oracle(values, k):
    """i-th break = sorted value at 1-based rank ceil(i*n/k)."""
    s = sorted(values)
    n = len(s)
    out = []
    for i in range(1, k):
        b = s[math.ceil(i * n / k) - 1]
        if not out or b > out[-1]:
            out.append(b)
    return out


# -- access control ---------------------------------------------------------------------------

LABEL_RANK = {"public": 0, "restricted": 1, "confidential": 2}


def gate_oracle(token_ok, role_perms, perm, clearance, layer_label, acl, principal):
    """Brute-force conjunction of the three gates, first failure wins.

    ``acl`` is a list of (principal, perm, effect) for the layer, or None when
    no layer is named.
    """
    if not token_ok:
        return False, "expired_token"
    if perm not in role_perms:
        return False, "rbac"
    if acl is None:
        return True, "ok"
    if LABEL_RANK[clearance] < LABEL_RANK[layer_label]:
        return False, "mac"
    relevant = [(p, e) for p, q, e in acl if q == perm]
    if any(p == principal and e == "deny" for p, e in relevant):
        return False, "dac"
    allows = [p for p, e in relevant if e == "allow"]
    if allows and principal not in allows:
        return False, "dac"
    return True, "ok"
