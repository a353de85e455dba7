"""Simplicial meshes (periodic torus, Dirichlet square/disk), P1 fields and norms.

Structured meshes split each lattice cell into n! Kuhn simplices: for a
permutation ``pi`` the simplex walks from the cell's lower corner along
``e_pi(1), e_pi(2), ...``. Integrals use one-point (centroid) quadrature and
region membership is decided by the element centroid.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy import signal
from scipy.spatial import Delaunay

from .errors import InvalidArgument

RADIUS_RATIO = 1.25


def _kuhn_perms(n):
    return list(itertools.permutations(range(n)))


def _kuhn_offsets(n):
    """Vertex offsets (n!, n+1, n) of the Kuhn simplices of the unit cube."""
    out = []
    for perm in _kuhn_perms(n):
        v = np.zeros(n, dtype=int)
        verts = [v.copy()]
        for ax in perm:
            v[ax] += 1
            verts.append(v.copy())
        out.append(verts)
    return np.array(out)


def _barycentric(coords):
    """Volumes and barycentric gradients for simplices ``coords`` (Ne, n+1, n)."""
    n = coords.shape[-1]
    t = np.swapaxes(coords[:, 1:, :] - coords[:, :1, :], 1, 2)  # columns X_k - X_0
    det = np.linalg.det(t)
    if np.any(np.abs(det) < 1e-300):
        raise InvalidArgument("degenerate simplex in mesh")
    tinv = np.linalg.inv(t)  # rows are grad lambda_k, k = 1..n
    g0 = -tinv.sum(axis=1, keepdims=True)
    grads = np.concatenate([g0, tinv], axis=1)
    vol = np.abs(det) / math.factorial(n)
    return vol, grads


class Mesh:
    """Common simplicial mesh data; see :class:`TorusGrid` and :class:`DirichletMesh`."""

    kind = "mesh"
    periodic = False

    def _finish(self, nodes, elements, elem_coords):
        self.nodes = np.ascontiguousarray(nodes, dtype=float)
        self.elements = np.ascontiguousarray(elements, dtype=np.int64)
        self.elem_coords = elem_coords
        self.dim = self.nodes.shape[1]
        self.vol, self.grads = _barycentric(elem_coords)
        self.centroids = elem_coords.mean(axis=1)
        for arr in (self.nodes, self.elements, self.vol, self.grads, self.centroids):
            arr.setflags(write=False)

    @property
    def n_nodes(self):
        return len(self.nodes)

    @property
    def n_elements(self):
        return len(self.elements)

    @property
    def measure(self):
        return float(self.vol.sum())

    def element_mask(self, region):
        if region is None:
            return np.ones(self.n_elements, dtype=bool)
        return region.contains(self.centroids)


class TorusGrid(Mesh):
    """Uniform Kuhn triangulation of the periodic unit cell ``Y = (0,1)^n``.

    Node ``i`` (a multi-index in ``[0, N)^n``) sits at ``i/N``; opposite faces are
    identified by integer modular arithmetic. Element vertex coordinates are
    stored unwrapped so every simplex is geometrically intact.
    """

    kind = "torus"
    periodic = True

    def __init__(self, n: int, N: int):
        if n not in (2, 3):
            raise InvalidArgument("torus dimension must be 2 or 3")
        if int(N) != N or N < 4:
            raise InvalidArgument("N must be an integer >= 4")
        self.N = int(N)
        self.shape = (self.N,) * n
        offs = _kuhn_offsets(n)
        cells = np.stack(np.meshgrid(*[np.arange(N)] * n, indexing="ij"), axis=-1).reshape(-1, n)
        # element (cell, type) ordering: cell-major, Kuhn type minor
        verts = cells[:, None, None, :] + offs[None, :, :, :]  # (C, n!, n+1, n)
        verts = verts.reshape(-1, n + 1, n)
        elements = np.ravel_multi_index(tuple(np.moveaxis(verts % N, -1, 0)), self.shape)
        nodes = np.stack(np.meshgrid(*[np.arange(N)] * n, indexing="ij"), axis=-1).reshape(-1, n) / N
        self.n_types = len(offs)
        self.type_offsets = offs
        self.elem_type = np.tile(np.arange(self.n_types), len(cells))
        self.elem_cell = np.repeat(np.arange(len(cells)), self.n_types)
        self.h = 1.0 / N
        self._finish(nodes, elements, verts / N)
        self.boundary = np.zeros(0, dtype=np.int64)
        self.diameter = math.sqrt(n) / 2.0  # largest periodic distance

    def locate(self, points):
        """Element index and P1 weights (m, n+1) of points reduced modulo 1."""
        pts = np.mod(np.asarray(points, dtype=float), 1.0) * self.N
        cell = np.minimum(np.floor(pts).astype(np.int64), self.N - 1)
        t = pts - cell
        order = np.argsort(-t, axis=1, kind="stable")
        perms = {p: k for k, p in enumerate(_kuhn_perms(self.dim))}
        typ = np.array([perms[tuple(o)] for o in order])
        ts = np.take_along_axis(t, order, axis=1)
        w = np.empty((len(pts), self.dim + 1))
        w[:, 0] = 1.0 - ts[:, 0]
        for k in range(1, self.dim):
            w[:, k] = ts[:, k - 1] - ts[:, k]
        w[:, self.dim] = ts[:, -1]
        cidx = np.ravel_multi_index(tuple(cell.T), self.shape)
        return cidx * self.n_types + typ, w

    def interpolate(self, values, points):
        """P1 interpolant of nodal ``values`` at arbitrary ``points`` (periodic)."""
        e, w = self.locate(points)
        v = np.asarray(values)[self.elements[e]]
        if v.ndim == 2:
            return np.sum(v * w, axis=1)
        return np.einsum("mk,mk...->m...", w, v)

    def node_index(self, multi):
        return np.ravel_multi_index(tuple(np.mod(np.asarray(multi), self.N).T), self.shape)


class DirichletMesh(Mesh):
    """Mesh of a bounded domain with a boundary node list for Dirichlet data."""

    def __init__(self, domain, nodes, elements, boundary, h, lattice=None):
        self.domain = domain
        self.h = h
        coords = np.asarray(nodes, float)[np.asarray(elements)]
        self._finish(nodes, elements, coords)
        self.boundary = np.asarray(boundary, dtype=np.int64)
        self.lattice = lattice
        if lattice is not None:
            self.elem_type = lattice["elem_type"]
            self.elem_cell = lattice["elem_cell"]
            self.n_types = lattice["n_types"]
        lo = self.nodes.min(axis=0)
        hi = self.nodes.max(axis=0)
        self.diameter = float(np.linalg.norm(hi - lo))
        self.kind = domain["type"]

    @classmethod
    def square(cls, center=(0.5, 0.5), half_width=0.5, h=1 / 32, cells=None):
        """Kuhn-triangulated box; ``cells`` per side overrides ``ceil(2 hw / h)``."""
        center = np.asarray(center, dtype=float)
        n = len(center)
        if n not in (2, 3):
            raise InvalidArgument("dimension must be 2 or 3")
        if half_width <= 0 or (cells is None and h <= 0):
            raise InvalidArgument("half_width and h must be positive")
        N = int(cells) if cells is not None else int(math.ceil(2 * half_width / h - 1e-9))
        if N < 1:
            raise InvalidArgument("need at least one cell per side")
        hh = 2.0 * half_width / N
        lo = center - half_width
        idx = np.stack(np.meshgrid(*[np.arange(N + 1)] * n, indexing="ij"), axis=-1).reshape(-1, n)
        nodes = lo + idx * hh
        # snap the far faces exactly onto the geometry
        nodes[idx == N] = np.broadcast_to(center + half_width, nodes.shape)[idx == N]
        offs = _kuhn_offsets(n)
        cells_idx = np.stack(np.meshgrid(*[np.arange(N)] * n, indexing="ij"), axis=-1).reshape(-1, n)
        verts = (cells_idx[:, None, None, :] + offs[None]).reshape(-1, n + 1, n)
        elements = np.ravel_multi_index(tuple(np.moveaxis(verts, -1, 0)), (N + 1,) * n)
        boundary = np.flatnonzero(np.any((idx == 0) | (idx == N), axis=1))
        lattice = {
            "origin": lo,
            "h": hh,
            "cells": (N,) * n,
            "n_types": len(offs),
            "type_offsets": offs,
            "elem_type": np.tile(np.arange(len(offs)), len(cells_idx)),
            "elem_cell": np.repeat(np.arange(len(cells_idx)), len(offs)),
        }
        dom = {"type": "square", "center": center.tolist(), "half_width": float(half_width)}
        return cls(dom, nodes, elements, boundary, hh, lattice)

    @classmethod
    def disk(cls, center=(0.0, 0.0), radius=1.0, h=1 / 16):
        """Polar-like triangulation: rings of 6k points at radii k R / K, Delaunay-connected."""
        center = np.asarray(center, dtype=float)
        if len(center) != 2:
            raise InvalidArgument("disk meshes are two-dimensional")
        if radius <= 0 or h <= 0:
            raise InvalidArgument("radius and h must be positive")
        K = max(2, int(math.ceil(radius / h)))
        pts = [np.zeros(2)]
        for k in range(1, K + 1):
            m = 6 * k
            th = 2 * np.pi * np.arange(m) / m + (0.5 * np.pi / m) * (k % 2)
            pts.append(np.stack([np.cos(th), np.sin(th)], axis=1) * (radius * k / K))
        nodes = np.vstack(pts)
        tri = Delaunay(nodes)
        simp = tri.simplices
        # drop slivers Delaunay may create between boundary points
        coords = nodes[simp]
        e1 = coords[:, 1] - coords[:, 0]
        e2 = coords[:, 2] - coords[:, 0]
        area = 0.5 * np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
        simp = simp[area > 1e-12 * (radius / K) ** 2]
        nb = 6 * K
        boundary = np.arange(len(nodes) - nb, len(nodes))
        dom = {"type": "disk", "center": center.tolist(), "radius": float(radius)}
        return cls(dom, nodes + center, simp, boundary, radius / K)

    def interior_nodes(self):
        mask = np.ones(self.n_nodes, dtype=bool)
        mask[self.boundary] = False
        return np.flatnonzero(mask)

    def contains_ball(self, center, radius):
        d = self.domain
        c = np.asarray(center, float)
        if d["type"] == "square":
            return bool(np.all(np.abs(c - np.asarray(d["center"])) + radius <= d["half_width"] + 1e-12))
        return bool(np.linalg.norm(c - np.asarray(d["center"])) + radius <= d["radius"] + 1e-12)


# --- regions ---------------------------------------------------------------------


@dataclass(frozen=True)
class Ball:
    center: tuple
    radius: float

    def contains(self, pts):
        return np.linalg.norm(np.asarray(pts) - np.asarray(self.center), axis=-1) <= self.radius

    def scaled(self, factor):
        return Ball(tuple(self.center), self.radius * factor)


@dataclass(frozen=True)
class Box:
    lo: tuple
    hi: tuple

    def contains(self, pts):
        pts = np.asarray(pts)
        return np.all((pts >= np.asarray(self.lo)) & (pts <= np.asarray(self.hi)), axis=-1)


class Everywhere:
    def contains(self, pts):
        return np.ones(len(pts), dtype=bool)


# --- fields ------------------------------------------------------------------------


class Field:
    """Nodal or element-wise scalar/vector data on a mesh.

    Values are stored read-only; assign a new array to ``values`` to mutate,
    which also drops the cached element gradient.
    """

    def __init__(self, mesh: Mesh, values, location="node"):
        if location not in ("node", "element"):
            raise InvalidArgument("location must be 'node' or 'element'")
        self.mesh = mesh
        self.location = location
        self._grad = None
        self.values = values

    @property
    def values(self):
        return self._values

    @values.setter
    def values(self, v):
        v = np.array(v, dtype=float)
        count = self.mesh.n_nodes if self.location == "node" else self.mesh.n_elements
        if v.shape[0] != count or v.ndim > 3:
            raise InvalidArgument(f"expected {count} {self.location} values, got shape {v.shape}")
        v.setflags(write=False)
        self._values = v
        self._grad = None

    @property
    def rank(self):
        return "scalar" if self._values.ndim == 1 else "vector"

    def at_centroids(self):
        """Element values (centroid evaluation of the P1 interpolant for nodal data)."""
        if self.location == "element":
            return self._values
        return self._values[self.mesh.elements].mean(axis=1)

    def copy_with(self, values):
        return Field(self.mesh, values, self.location)


def gradient(f: Field) -> Field:
    """Element-wise gradient of the P1 interpolant of a scalar nodal field."""
    if f.location != "node" or f.rank != "scalar":
        raise InvalidArgument("gradient needs a scalar nodal field")
    if f._grad is None:
        m = f.mesh
        g = np.einsum("ekd,ek->ed", m.grads, f.values[m.elements])
        f._grad = Field(m, g, "element")
    return f._grad


def _magnitudes(f: Field):
    v = f.at_centroids()
    return np.abs(v) if v.ndim == 1 else np.linalg.norm(v, axis=-1)


def lq_norm(f: Field, q: float, region=None, averaged: bool = False) -> float:
    """Centroid-quadrature ``L^q`` norm of ``|f|`` over ``region`` (averaged if flagged)."""
    if not q >= 1:
        raise InvalidArgument("q must be >= 1")
    mask = f.mesh.element_mask(region)
    if not mask.any():
        raise InvalidArgument("empty region: no element centroid inside")
    a = _magnitudes(f)[mask]
    w = f.mesh.vol[mask]
    if math.isinf(q):
        return float(a.max())
    top = a.max()
    if top == 0:
        return 0.0
    # scale by the maximum for robustness at large q
    s = float(np.sum(w * (a / top) ** q))
    if averaged:
        s /= float(w.sum())
    return float(top * s ** (1.0 / q))


def integral_mean(f: Field, region=None) -> float:
    """Exact mean of a scalar P1 field (or element field) over ``region``."""
    mask = f.mesh.element_mask(region)
    if not mask.any():
        raise InvalidArgument("empty region: no element centroid inside")
    vals = f.at_centroids()[mask]
    w = f.mesh.vol[mask]
    return float(np.sum(w * vals) / np.sum(w))


def mean_zero(f: Field, region=None) -> Field:
    if f.rank != "scalar":
        raise InvalidArgument("mean_zero needs a scalar field")
    return f.copy_with(f.values - integral_mean(f, region))


def radius_ladder(eps: float, diameter: float, ratio: float = RADIUS_RATIO):
    """Radii ``eps * ratio^k`` below ``diameter``, closed by the diameter itself."""
    if not eps > 0:
        raise InvalidArgument("eps must be positive")
    if eps >= diameter:
        return np.array([eps])
    k = int(math.floor(math.log(diameter / eps) / math.log(ratio) + 1e-12))
    radii = eps * ratio ** np.arange(k + 1)
    radii = radii[radii < diameter]
    return np.append(radii, diameter)


def truncated_maximal(f: Field, eps: float, eval_region=None, support_region=None, method="auto") -> Field:
    """Truncated maximal function ``sup_{rho >= eps} avg_{B_rho(x)} f 1_support`` at nodes.

    Averages are taken over ``B_rho(x)`` intersected with the mesh (elements by
    centroid membership). Radii follow :func:`radius_ladder`. Nodes neither
    inside ``eval_region`` nor on an element whose centroid is inside get ``nan``. On structured meshes
    the ball sums are lattice correlations done with FFTs; otherwise a sorted
    distance sweep per node is used.
    """
    if not eps > 0:
        raise InvalidArgument("eps must be positive")
    m = f.mesh
    g = _magnitudes(f) if f.rank == "vector" else f.at_centroids()
    if np.any(g < 0):
        raise InvalidArgument("truncated_maximal needs a nonnegative field")
    g = np.where(m.element_mask(support_region), g, 0.0)
    emask = m.element_mask(eval_region)
    inside = np.flatnonzero(eval_region.contains(m.nodes)) if eval_region is not None else np.arange(m.n_nodes)
    nodes = np.union1d(np.unique(m.elements[emask]), inside)
    radii = radius_ladder(eps, m.diameter)
    structured = isinstance(m, TorusGrid) or getattr(m, "lattice", None) is not None
    if method == "auto":
        method = "fft" if structured else "sweep"
    if method == "fft":
        best = _maximal_fft(m, g, radii, nodes)
    else:
        best = _maximal_sweep(m, g, radii, nodes)
    out = np.full(m.n_nodes, np.nan)
    out[nodes] = best
    return Field(m, out, "node")


def _maximal_sweep(m, g, radii, nodes):
    wg = m.vol * g
    best = np.zeros(len(nodes))
    for j, i in enumerate(nodes):
        d = m.centroids - m.nodes[i]
        if m.periodic:
            d -= np.round(d)
        dist = np.linalg.norm(d, axis=1)
        order = np.argsort(dist, kind="stable")
        ds = dist[order]
        num = np.cumsum(wg[order])
        den = np.cumsum(m.vol[order])
        k = np.searchsorted(ds, radii, side="right") - 1
        ok = k >= 0
        if ok.any():
            best[j] = np.max(num[k[ok]] / den[k[ok]])
    return best


def _lattice(m):
    if isinstance(m, TorusGrid):
        return np.zeros(m.dim), m.h, m.shape, m.type_offsets, True
    lat = m.lattice
    return lat["origin"], lat["h"], lat["cells"], lat["type_offsets"], False


def _maximal_fft(m, g, radii, nodes):
    origin, h, cells, offs, periodic = _lattice(m)
    n = m.dim
    ntypes = len(offs)
    cent_off = offs.mean(axis=1)  # centroid offset within the cell per type
    gt = np.zeros((ntypes,) + tuple(cells))
    one = np.zeros_like(gt)
    cell_multi = np.unravel_index(m.elem_cell, cells)
    gt[(m.elem_type,) + cell_multi] = m.vol * g
    one[(m.elem_type,) + cell_multi] = m.vol
    node_shape = tuple(cells) if periodic else tuple(c + 1 for c in cells)
    node_multi = np.unravel_index(nodes, node_shape)
    best = np.zeros(len(nodes))
    for rho in radii:
        R = rho / h
        D = int(math.ceil(R)) + 1
        rng = np.arange(-D, D + 1)
        grids = np.meshgrid(*[rng] * n, indexing="ij")
        num = np.zeros(node_shape)
        den = np.zeros(node_shape)
        for t in range(ntypes):
            # kernel over displacements d = cell - node
            dist = np.sqrt(sum((grids[a] + cent_off[t, a]) ** 2 for a in range(n)))
            ker = (dist <= R).astype(float)
            if periodic:
                num += _circular_corr(gt[t], ker, D)
                den += _circular_corr(one[t], ker, D)
            else:
                num += _linear_corr(gt[t], ker, D, node_shape)
                den += _linear_corr(one[t], ker, D, node_shape)
        with np.errstate(invalid="ignore", divide="ignore"):
            avg = np.where(den > 0.5 * np.min(m.vol), num / np.maximum(den, 1e-300), 0.0)
        best = np.maximum(best, avg[node_multi])
    return best


def _linear_corr(a, ker, D, node_shape):
    # out[i] = sum_c a[c] ker[c - i + D]; correlation == convolution with flipped kernel
    full = signal.fftconvolve(a, ker[(slice(None, None, -1),) * a.ndim], mode="full")
    # full index j corresponds to i = j - (2D) + D ... align: conv(a, flip(ker))[j] = sum_c a[c] ker[c - j + 2D]
    sl = tuple(slice(D, D + s) for s in node_shape)
    pad = [(0, max(0, D + s - f)) for s, f in zip(node_shape, full.shape)]
    if any(p[1] for p in pad):
        full = np.pad(full, pad)
    out = full[sl]
    return np.where(np.abs(out) < 1e-13 * max(1.0, np.abs(out).max()), 0.0, out)


def _circular_corr(a, ker, D):
    N = a.shape
    fold = np.zeros(N)
    idx = np.stack(np.meshgrid(*[np.arange(-D, D + 1)] * a.ndim, indexing="ij"), -1).reshape(-1, a.ndim)
    kv = ker.reshape(-1)
    sel = kv > 0
    # minimal-image membership: an element counts once if any image lies in the ball
    np.maximum.at(fold, tuple((idx[sel] % np.array(N)).T), 1.0)
    out = np.real(np.fft.ifftn(np.fft.fftn(a) * np.conj(np.fft.fftn(fold))))
    return np.where(np.abs(out) < 1e-13 * max(1.0, np.abs(out).max()), 0.0, out)


# --- serialization --------------------------------------------------------------------


def write_field_binary(f: Field, path):
    """Header: three little-endian int64 (dims, N, rank) with N the number of
    nodes (or elements for element fields); payload: float64, node-major."""
    vals = np.asarray(f.values, dtype="<f8")
    rank = 1 if vals.ndim == 1 else int(np.prod(vals.shape[1:]))
    header = np.array([f.mesh.dim, vals.shape[0], rank], dtype="<i8")
    with open(path, "wb") as fh:
        fh.write(header.tobytes())
        fh.write(np.ascontiguousarray(vals.reshape(vals.shape[0], rank)).tobytes())


def read_field_binary(path):
    """Return ``(dims, values)`` with values of shape (N,) or (N, rank)."""
    raw = open(path, "rb").read()
    dims, count, rank = np.frombuffer(raw[:24], dtype="<i8")
    vals = np.frombuffer(raw[24:], dtype="<f8")
    if vals.size != count * rank:
        raise InvalidArgument("binary field payload size does not match header")
    vals = vals.reshape(count, rank)
    return int(dims), (vals[:, 0].copy() if rank == 1 else vals.copy())


def write_field_csv(f: Field, path):
    pts = f.mesh.nodes if f.location == "node" else f.mesh.centroids
    vals = np.asarray(f.values)
    vals2 = vals[:, None] if vals.ndim == 1 else vals.reshape(len(vals), -1)
    head = [f"x{i + 1}" for i in range(pts.shape[1])] + (
        ["value"] if vals.ndim == 1 else [f"v{i + 1}" for i in range(vals2.shape[1])]
    )
    np.savetxt(path, np.hstack([pts, vals2]), delimiter=",", header=",".join(head), comments="", fmt="%.17g")
