"""Planar rotated-rectangle geometry shared by the simulator and task oracles.

All rectangles are described by center (cx, cy), full side lengths (w, l)
and rotation theta. Everything here is pure f64 math so results are
bit-reproducible across runs.
"""

from __future__ import annotations

import math

import numpy as np

TWO_PI = 2.0 * math.pi


def norm_angle_pi(theta: float) -> float:
    """Normalize an angle into [0, pi) (a parallel gripper is 2-fold symmetric)."""
    t = math.fmod(theta, math.pi)
    if t < 0.0:
        t += math.pi
    if t >= math.pi:  # fmod rounding at the boundary
        t = 0.0
    return t


def ang_dist_mod(a: float, b: float, period: float = math.pi) -> float:
    """Smallest distance between two angles identified modulo `period`."""
    d = math.fmod(abs(a - b), period)
    return min(d, period - d)


def rect_corners(cx: float, cy: float, w: float, l: float, theta: float) -> np.ndarray:
    """Corner coordinates of a rotated rectangle, CCW order, shape (4, 2)."""
    c, s = math.cos(theta), math.sin(theta)
    hw, hl = w / 2.0, l / 2.0
    local = np.array([(hw, hl), (-hw, hl), (-hw, -hl), (hw, -hl)])
    rot = np.array([(c, -s), (s, c)])
    return local @ rot.T + np.array([cx, cy])


def rect_contains(cx: float, cy: float, w: float, l: float, theta: float,
                  px, py):
    """Point-in-rotated-rectangle test; px/py may be scalars or arrays."""
    c, s = math.cos(theta), math.sin(theta)
    dx = np.asarray(px) - cx
    dy = np.asarray(py) - cy
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (np.abs(u) <= w / 2.0) & (np.abs(v) <= l / 2.0)


def clip_convex(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of a convex `subject` by a convex CCW `clip`.

    Returns the intersection polygon as an (m, 2) array (m may be 0).
    """
    output = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not output:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        inputs = output
        output = []
        prev = inputs[-1]
        prev_in = ex * (prev[1] - ay) - ey * (prev[0] - ax) >= 0.0
        for cur in inputs:
            cur_in = ex * (cur[1] - ay) - ey * (cur[0] - ax) >= 0.0
            if cur_in != prev_in:
                # edge crossing: intersect segment prev->cur with clip edge
                dx, dy = cur[0] - prev[0], cur[1] - prev[1]
                denom = ex * dy - ey * dx
                if denom != 0.0:
                    t = (ex * (ay - prev[1]) - ey * (ax - prev[0])) / denom
                    output.append((prev[0] + t * dx, prev[1] + t * dy))
            if cur_in:
                output.append(cur)
            prev, prev_in = cur, cur_in
    return np.array(output) if output else np.empty((0, 2))


def poly_area(poly: np.ndarray) -> float:
    """Unsigned shoelace area."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))) / 2.0


def poly_centroid(poly: np.ndarray) -> tuple[float, float]:
    """Area centroid; falls back to vertex mean for degenerate polygons."""
    if len(poly) < 3:
        if len(poly) == 0:
            return (0.0, 0.0)
        return (float(poly[:, 0].mean()), float(poly[:, 1].mean()))
    x, y = poly[:, 0], poly[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    a = float(cross.sum()) / 2.0
    if abs(a) < 1e-15:
        return (float(x.mean()), float(y.mean()))
    cx = float(((x + xn) * cross).sum()) / (6.0 * a)
    cy = float(((y + yn) * cross).sum()) / (6.0 * a)
    return (cx, cy)


def overlap_area(rect_a: np.ndarray, rect_b: np.ndarray) -> float:
    """Intersection area of two rectangles given as corner arrays."""
    return poly_area(clip_convex(rect_a, rect_b))


def overlap_region(rect_a: np.ndarray, rect_b: np.ndarray) -> tuple[float, tuple[float, float]]:
    """(area, centroid) of the intersection of two corner-array rectangles."""
    poly = clip_convex(rect_a, rect_b)
    return poly_area(poly), poly_centroid(poly)
