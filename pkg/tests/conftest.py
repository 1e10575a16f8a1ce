"""Shared mesh builders for the test suite.

These are plain functions rather than fixtures so tests can parameterize
sizes; anything expensive is cached per session below.
"""

import numpy as np
import pytest

from qcface.mesh import TriMesh3, UVMesh


def grid_points(n, lo=0.0, hi=1.0):
    """n x n vertex lattice on [lo, hi]^2, row-major (x fastest)."""
    s = np.linspace(lo, hi, n)
    X, Y = np.meshgrid(s, s)
    return np.column_stack([X.ravel(), Y.ravel()])


def grid_faces(n, m=None):
    """Triangulated (n x m)-vertex lattice; counterclockwise faces."""
    m = n if m is None else m
    idx = np.arange(n * m).reshape(m, n)
    v00 = idx[:-1, :-1].ravel()
    v10 = idx[:-1, 1:].ravel()
    v01 = idx[1:, :-1].ravel()
    v11 = idx[1:, 1:].ravel()
    return np.concatenate([
        np.column_stack([v00, v10, v11]),
        np.column_stack([v00, v11, v01]),
    ])


def grid_mesh3(n, height=None, lo=0.0, hi=1.0):
    """Planar (or height-field) n x n grid as a TriMesh3 with +z orientation."""
    pts = grid_points(n, lo, hi)
    z = np.zeros(len(pts)) if height is None else height(pts[:, 0], pts[:, 1])
    return TriMesh3(np.column_stack([pts, z]), grid_faces(n))


def grid_uv(n, lo=0.0, hi=1.0):
    return UVMesh(grid_points(n, lo, hi), grid_faces(n))


def disk_uv(n):
    """n x n grid mapped onto the unit disk; boundary lies on the unit circle."""
    pts = grid_points(n, -1.0, 1.0)
    x, y = pts[:, 0], pts[:, 1]
    u = x * np.sqrt(1.0 - 0.5 * y * y)
    v = y * np.sqrt(1.0 - 0.5 * x * x)
    return UVMesh(np.column_stack([u, v]), grid_faces(n))


def bumpy_grid(n=24, seed=7, amp=0.15):
    """Asymmetric smooth height field; useful for invariance tests."""
    rng = np.random.default_rng(seed)
    c = rng.uniform(-0.5, 0.5, size=(4, 2))
    w = rng.uniform(0.5, 1.5, size=4) * np.array([1, -1, 1, -1])

    def height(x, y):
        z = np.zeros_like(x)
        for (cx, cy), wk in zip(c, w):
            z += wk * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / 0.08)
        return amp * z

    return grid_mesh3(n, height, lo=-1.0, hi=1.0)


def icosphere(subdiv=3, radius=1.0):
    t = (1 + 5 ** 0.5) / 2
    v = np.array(
        [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
         (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
         (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)],
        dtype=float,
    )
    f = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
         (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
         (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
         (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    v /= np.linalg.norm(v, axis=1)[:, None]
    verts = [tuple(p) for p in v]
    for _ in range(subdiv):
        cache = {}

        def midpoint(a, b):
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                p = np.add(verts[a], verts[b])
                p /= np.linalg.norm(p)
                cache[key] = len(verts)
                verts.append(tuple(p))
            return cache[key]

        nf = []
        for a, b, c in f:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            nf += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        f = nf
    return TriMesh3(np.array(verts) * radius, np.array(f, dtype=int))


def open_cylinder(radius=0.5, height=2.0, n_theta=64, n_z=21):
    """Tube without caps, outward-oriented; two boundary circles."""
    th = np.linspace(0, 2 * np.pi, n_theta, endpoint=False)
    z = np.linspace(0, height, n_z)
    T, Z = np.meshgrid(th, z)
    v = np.column_stack([radius * np.cos(T).ravel(), radius * np.sin(T).ravel(), Z.ravel()])
    faces = []
    for j in range(n_z - 1):
        for i in range(n_theta):
            i2 = (i + 1) % n_theta
            a, b = j * n_theta + i, j * n_theta + i2
            c, d = (j + 1) * n_theta + i, (j + 1) * n_theta + i2
            faces += [(a, b, d), (a, d, c)]
    return TriMesh3(v, np.array(faces, dtype=int))


def spherical_cap(theta0=np.pi / 3, n_rings=12, radius=1.0):
    """Cap of a radius-R sphere around +z, rim at polar angle theta0."""
    from scipy.spatial import Delaunay

    pts3 = [(0.0, 0.0, radius)]
    for k in range(1, n_rings + 1):
        th = theta0 * k / n_rings
        m = 6 * k
        phi = np.arange(m) * 2 * np.pi / m + 0.05 * k
        r = radius * np.sin(th)
        z = radius * np.cos(th)
        pts3.extend(zip(r * np.cos(phi), r * np.sin(phi), np.full(m, z)))
    pts3 = np.array(pts3)
    tri = Delaunay(pts3[:, :2])
    f = tri.simplices.copy()
    c = pts3[f][:, :, :2]
    area2 = (c[:, 1, 0] - c[:, 0, 0]) * (c[:, 2, 1] - c[:, 0, 1]) - (
        c[:, 1, 1] - c[:, 0, 1]
    ) * (c[:, 2, 0] - c[:, 0, 0])
    f[area2 < 0] = f[area2 < 0][:, ::-1]
    return TriMesh3(pts3, f)


def torus_mesh(R=1.0, r=0.3, n_u=24, n_v=12):
    u = np.arange(n_u) * 2 * np.pi / n_u
    v = np.arange(n_v) * 2 * np.pi / n_v
    U, V = np.meshgrid(u, v)
    x = (R + r * np.cos(V)) * np.cos(U)
    y = (R + r * np.cos(V)) * np.sin(U)
    z = r * np.sin(V)
    verts = np.column_stack([x.ravel(), y.ravel(), z.ravel()])
    faces = []
    for j in range(n_v):
        for i in range(n_u):
            a = j * n_u + i
            b = j * n_u + (i + 1) % n_u
            c = ((j + 1) % n_v) * n_u + i
            d = ((j + 1) % n_v) * n_u + (i + 1) % n_u
            faces += [(a, b, d), (a, d, c)]
    return TriMesh3(verts, np.array(faces, dtype=int))


def random_rotation(rng):
    q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def circle_boundary_constraints(uv, radius=1.0):
    """Pin the outer boundary loop to a circle by arc-length proportion."""
    from qcface.solver import Constraints

    loop = np.array(uv.boundary_loops()[0])
    pts = uv.points[loop]
    seg = np.linalg.norm(np.diff(np.vstack([pts, pts[:1]]), axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg[:-1])])
    theta = np.arctan2(pts[0, 1], pts[0, 0]) + 2 * np.pi * s / seg.sum()
    target = radius * np.column_stack([np.cos(theta), np.sin(theta)])
    return Constraints().pin(loop, target), loop


def smooth_random_field(uv, rng, max_modulus=0.7, degree=2):
    """Band-limited random Beltrami field: low-order polynomial in z, rescaled."""
    cent = uv.points[uv.faces].mean(axis=1)
    z = cent[:, 0] + 1j * cent[:, 1]
    c = rng.standard_normal(degree + 1) + 1j * rng.standard_normal(degree + 1)
    raw = np.zeros_like(z)
    for p, ck in enumerate(c):
        raw += ck * z**p
    m = np.abs(raw).max()
    if m > 0:
        raw *= rng.uniform(0.3, 1.0) * max_modulus / m
    return raw


@pytest.fixture(scope="session")
def icosphere4():
    return icosphere(4)


@pytest.fixture(scope="session")
def grid32():
    return grid_mesh3(32)
