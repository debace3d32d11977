"""Synthetic test surfaces, noise models and partial-overlap cropping."""

from __future__ import annotations

import numpy as np

from .geometry import Surface


def strip_mesh(nx: int, ny: int, length: float = 1.0, width: float = 0.25) -> Surface:
    """Regular triangulated rectangle in the ``z = 0`` plane, ``nx * ny`` vertices."""
    if nx < 2 or ny < 2:
        raise ValueError("strip needs at least 2 x 2 vertices")
    xs, ys = np.meshgrid(np.linspace(0, length, nx), np.linspace(0, width, ny), indexing="ij")
    pts = np.stack([xs.ravel(), ys.ravel(), np.zeros(nx * ny)], axis=1)
    idx = np.arange(nx * ny).reshape(nx, ny)
    a, b = idx[:-1, :-1].ravel(), idx[1:, :-1].ravel()
    c, d = idx[1:, 1:].ravel(), idx[:-1, 1:].ravel()
    faces = np.concatenate([np.stack([a, b, c], 1), np.stack([a, c, d], 1)])
    return Surface(pts, faces)


def uv_sphere(n_lat: int = 16, n_lon: int = 32, radius: float = 1.0) -> Surface:
    """Closed sphere with outward-oriented triangles."""
    theta = np.linspace(0, np.pi, n_lat + 1)[1:-1]
    phi = np.linspace(0, 2 * np.pi, n_lon, endpoint=False)
    t, p = np.meshgrid(theta, phi, indexing="ij")
    ring = np.stack([np.sin(t) * np.cos(p), np.sin(t) * np.sin(p), np.cos(t)], -1).reshape(-1, 3)
    pts = np.vstack([[0, 0, 1], ring, [0, 0, -1]]) * radius
    south = len(pts) - 1
    idx = 1 + np.arange(len(theta) * n_lon).reshape(len(theta), n_lon)
    faces = []
    for j in range(n_lon):
        jn = (j + 1) % n_lon
        faces.append([0, idx[0, j], idx[0, jn]])
        faces.append([south, idx[-1, jn], idx[-1, j]])
        for i in range(len(theta) - 1):
            faces.append([idx[i, j], idx[i + 1, j], idx[i + 1, jn]])
            faces.append([idx[i, j], idx[i + 1, jn], idx[i, jn]])
    return Surface(pts, np.array(faces))


def sinusoidal_warp(points, amplitude: float, wavelength: float, phase: float = 0.0, axis: int = 0):
    """Displace along ``z`` by ``amplitude * sin(2 pi x_axis / wavelength + phase)``."""
    pts = np.array(points, dtype=np.float64)
    pts[:, 2] += amplitude * np.sin(2 * np.pi * pts[:, axis] / wavelength + phase)
    return pts


def add_noise(
    surface: Surface,
    mode: str = "dense",
    sigma: float | None = None,
    fraction: float = 1.0,
    seed: int | None = 0,
) -> Surface:
    """I.i.d. per-axis Gaussian vertex noise.

    ``dense`` perturbs every vertex with standard deviation ``sigma``;
    ``sparse`` perturbs a uniformly sampled ``fraction`` of the vertices, with
    ``sigma`` defaulting to the average edge length.
    """
    rng = np.random.default_rng(seed)
    pts = surface.points.copy()
    n = len(pts)
    if mode == "dense":
        if sigma is None:
            raise ValueError("dense noise needs sigma")
        chosen = np.arange(n)
    elif mode == "sparse":
        if sigma is None:
            sigma = surface.avg_edge_length
        if not 0 <= fraction <= 1:
            raise ValueError("fraction must lie in [0, 1]")
        chosen = np.sort(rng.choice(n, size=int(round(fraction * n)), replace=False))
    else:
        raise ValueError(f"unknown noise mode {mode!r}")
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma > 0 and len(chosen):
        pts[chosen] += rng.normal(0.0, sigma, size=(len(chosen), 3))
    return Surface(pts, surface.faces, surface.edges)


def _face_normals(points, faces):
    v = points[faces]
    return np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])


def _view_basis(direction):
    d = np.asarray(direction, dtype=np.float64)
    nrm = np.linalg.norm(d)
    if not nrm > 0:
        raise ValueError("view direction must be a nonzero vector")
    d = d / nrm
    helper = np.eye(3)[np.argmin(np.abs(d))]
    u = np.cross(d, helper)
    u /= np.linalg.norm(u)
    return d, u, np.cross(d, u)


def _depth_visible_faces(points, faces, direction, resolution):
    d, u, w = _view_basis(direction)
    xy = np.stack([points @ u, points @ w], axis=1)
    depth = points @ d
    lo = xy.min(axis=0)
    extent = max(float((xy.max(axis=0) - lo).max()), 1e-300)
    px = extent / resolution
    uv = (xy - lo) / px  # pixel units
    zbuf = np.full((resolution + 1, resolution + 1), np.inf)
    fbuf = np.full(zbuf.shape, -1, dtype=np.int64)

    for f, tri in enumerate(faces):
        t = uv[tri]
        z = depth[tri]
        x0, y0 = np.floor(t.min(axis=0) - 0.5).astype(int)
        x1, y1 = np.ceil(t.max(axis=0) - 0.5).astype(int)
        x0, y0 = max(x0, 0), max(y0, 0)
        x1, y1 = min(x1, resolution), min(y1, resolution)
        if x1 < x0 or y1 < y0:
            continue
        gx, gy = np.meshgrid(np.arange(x0, x1 + 1) + 0.5, np.arange(y0, y1 + 1) + 0.5, indexing="ij")
        (ax, ay), (bx, by), (cx, cy) = t
        den = (by - cy) * (ax - cx) + (cx - bx) * (ay - cy)
        if abs(den) < 1e-14:
            continue
        l0 = ((by - cy) * (gx - cx) + (cx - bx) * (gy - cy)) / den
        l1 = ((cy - ay) * (gx - cx) + (ax - cx) * (gy - cy)) / den
        l2 = 1.0 - l0 - l1
        inside = (l0 >= -1e-9) & (l1 >= -1e-9) & (l2 >= -1e-9)
        if not inside.any():
            continue
        zz = l0 * z[0] + l1 * z[1] + l2 * z[2]
        sub_z = zbuf[x0 : x1 + 1, y0 : y1 + 1]
        sub_f = fbuf[x0 : x1 + 1, y0 : y1 + 1]
        closer = inside & (zz < sub_z)
        sub_z[closer] = zz[closer]
        sub_f[closer] = f

    visible = np.zeros(len(faces), dtype=bool)
    visible[fbuf[fbuf >= 0]] = True
    # faces too small to own a pixel centre: test their centroid against the buffer
    cen = uv[faces].mean(axis=1)
    cz = depth[faces].mean(axis=1)
    ci = np.clip(np.floor(cen).astype(int), 0, resolution)
    visible |= cz <= zbuf[ci[:, 0], ci[:, 1]] + 2 * px
    return visible


def crop_faces(surface: Surface, keep_faces: np.ndarray) -> tuple[Surface, np.ndarray]:
    """Sub-surface made of the selected faces; returns it and the kept-vertex mask."""
    faces = surface.faces[np.asarray(keep_faces, dtype=bool)]
    mask = np.zeros(len(surface.points), dtype=bool)
    mask[faces.ravel()] = True
    remap = -np.ones(len(surface.points), dtype=np.int64)
    remap[mask] = np.arange(mask.sum())
    return Surface(surface.points[mask], remap[faces]), mask


def partial_overlap_crop(
    surface: Surface, view_direction, mode: str = "depth", resolution: int = 512
) -> tuple[Surface, np.ndarray]:
    """Keep the part of a mesh visible when looking along ``view_direction``.

    ``depth`` rasterizes an orthographic depth buffer and keeps faces owning
    at least one visible sample; ``backface`` keeps faces whose normal points
    against the view direction. Returns the cropped surface and a mask over
    the input vertices marking which ones were kept.
    """
    if surface.faces is None:
        raise ValueError("partial_overlap_crop needs a triangle mesh")
    d, _, _ = _view_basis(view_direction)
    if mode == "backface":
        keep = _face_normals(surface.points, surface.faces) @ d < 0
    elif mode == "depth":
        keep = _depth_visible_faces(surface.points, surface.faces, d, int(resolution))
    else:
        raise ValueError(f"unknown crop mode {mode!r}")
    return crop_faces(surface, keep)


def crop_by_plane(surface: Surface, normal, keep_fraction: float) -> tuple[Surface, np.ndarray]:
    """Keep faces whose vertices all lie below the ``keep_fraction`` quantile along ``normal``."""
    if surface.faces is None:
        raise ValueError("crop_by_plane needs a triangle mesh")
    n = np.asarray(normal, dtype=np.float64)
    h = surface.points @ (n / np.linalg.norm(n))
    cut = np.quantile(h, keep_fraction)
    return crop_faces(surface, np.all(h[surface.faces] <= cut, axis=1))
