"""Planar polyline helpers shared by graph construction, data synthesis and metrics."""

from __future__ import annotations

import numpy as np


WRAP_SNAP = 1e-9


def wrap_angle(a):
    """Wrap angles to (-pi, pi].

    Angles within ``WRAP_SNAP`` of -pi are mapped to +pi so that round-off
    cannot flip an exactly opposite heading across the cut.
    """
    w = np.mod(np.asarray(a, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    return np.where(w <= -np.pi + WRAP_SNAP, w + 2.0 * np.pi, w)


def rotation(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def to_frame(points: np.ndarray, origin, heading: float) -> np.ndarray:
    """Express world ``points`` in the frame at ``origin`` whose x-axis points along ``heading``."""
    p = np.asarray(points, dtype=float) - np.asarray(origin, dtype=float)
    return p @ rotation(heading)


def from_frame(points: np.ndarray, origin, heading: float) -> np.ndarray:
    return np.asarray(points, dtype=float) @ rotation(heading).T + np.asarray(origin, dtype=float)


def arclength(poly: np.ndarray) -> np.ndarray:
    """Cumulative arclength at each vertex, starting at 0."""
    seg = np.linalg.norm(np.diff(poly, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(seg)])


def interpolate(poly: np.ndarray, s) -> np.ndarray:
    """Points at arclengths ``s`` (clamped to the polyline) by linear interpolation."""
    cum = arclength(poly)
    s = np.clip(np.asarray(s, dtype=float), 0.0, cum[-1])
    return np.stack([np.interp(s, cum, poly[:, 0]), np.interp(s, cum, poly[:, 1])], axis=-1)


def tangent_heading(poly: np.ndarray, s) -> np.ndarray:
    """Heading of the segment containing each arclength (the following one at a vertex)."""
    cum = arclength(poly)
    d = np.diff(poly, axis=0)
    keep = np.linalg.norm(d, axis=1) > 0
    d, starts = d[keep], cum[:-1][keep]
    idx = np.clip(np.searchsorted(starts, np.asarray(s, dtype=float), side="right") - 1, 0, len(d) - 1)
    return np.arctan2(d[idx, 1], d[idx, 0])


def dedupe(poly: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    poly = np.asarray(poly, dtype=float)
    if len(poly) < 2:
        return poly
    keep = np.concatenate([[True], np.linalg.norm(np.diff(poly, axis=0), axis=1) > tol])
    return poly[keep]


def project_onto_segments(points: np.ndarray, a: np.ndarray, b: np.ndarray):
    """Distances and clamped parameters of every point onto every segment.

    Returns ``(dist, t)`` each of shape (P, S).
    """
    d = b - a
    len2 = np.einsum("sk,sk->s", d, d)
    rel = points[:, None, :] - a[None, :, :]
    t = np.einsum("psk,sk->ps", rel, d) / np.where(len2 > 0, len2, 1.0)
    t = np.clip(np.where(len2 > 0, t, 0.0), 0.0, 1.0)
    foot = a[None] + t[..., None] * d[None]
    return np.linalg.norm(points[:, None, :] - foot, axis=-1), t


def project_arclength(points: np.ndarray, poly: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Arclength of the nearest point on ``poly`` and the distance to it, per point."""
    cum = arclength(poly)
    dist, t = project_onto_segments(np.atleast_2d(points), poly[:-1], poly[1:])
    j = np.argmin(dist, axis=1)
    rows = np.arange(len(j))
    seglen = np.diff(cum)
    return cum[j] + t[rows, j] * seglen[j], dist[rows, j]


def circular_mean(angles) -> float:
    a = np.asarray(angles, dtype=float)
    return float(np.arctan2(np.sin(a).mean(), np.cos(a).mean()))
