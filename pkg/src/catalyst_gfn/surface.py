"""Slab cutting along Miller planes and conversion to an atom graph."""

from __future__ import annotations

import itertools
import math
import shlex
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from typing import NamedTuple, Sequence

import numpy as np

from .bulk import RelaxedStructure, basis_positions

PLANE_SEARCH_BOUND = 4


class GeometryError(ValueError):
    pass


def _check_miller(miller) -> tuple:
    m = tuple(int(v) for v in miller)
    if len(m) != 3 or m == (0, 0, 0):
        raise GeometryError(f"invalid Miller indices {tuple(miller)}")
    return m


def d_spacing(a: float, miller) -> float:
    """Interplanar spacing ``a / sqrt(h^2 + k^2 + l^2)`` of a cubic lattice."""
    h, k, l = _check_miller(miller)
    if not a > 0:
        raise GeometryError(f"lattice parameter must be positive (got {a})")
    return a / math.sqrt(h * h + k * k + l * l)


def _dot(u, v) -> int:
    return u[0] * v[0] + u[1] * v[1] + u[2] * v[2]


def _cross(u, v) -> tuple:
    return (u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0])


def _egcd(a: int, b: int) -> tuple:
    """``(g, x, y)`` with ``a*x + b*y = g = gcd(|a|, |b|) >= 0``."""
    old_r, r, old_x, x, old_y, y = a, b, 1, 0, 0, 1
    while r:
        q = old_r // r
        old_r, r = r, old_r - q * r
        old_x, x = x, old_x - q * x
        old_y, y = y, old_y - q * y
    if old_r < 0:
        old_r, old_x, old_y = -old_r, -old_x, -old_y
    return old_r, old_x, old_y


@lru_cache(maxsize=None)
def plane_basis(miller) -> tuple:
    """Integer vectors ``(u1, u2, w)``: a reduced basis of the lattice plane and a stacking vector.

    ``u1 . m = u2 . m = 0`` and ``w . m = gcd(h, k, l)``; the triple has
    determinant +1, so it is a basis of the cubic lattice itself.
    """
    m = _check_miller(miller)
    rng = range(-PLANE_SEARCH_BOUND, PLANE_SEARCH_BOUND + 1)
    cands = [v for v in itertools.product(rng, rng, rng) if v != (0, 0, 0) and _dot(v, m) == 0]
    cands.sort(key=lambda v: (_dot(v, v), tuple(-x for x in v)))
    u1 = cands[0]
    u2 = next(v for v in cands if _cross(u1, v) != (0, 0, 0))
    # Lagrange-Gauss reduction of the 2D basis
    while True:
        if _dot(u2, u2) < _dot(u1, u1):
            u1, u2 = u2, u1
        mu = round(Fraction(_dot(u1, u2), _dot(u1, u1)))
        if mu == 0:
            break
        u2 = tuple(b - mu * a for a, b in zip(u1, u2))
    g1, x1, y1 = _egcd(m[0], m[1])
    g, x2, y2 = _egcd(g1, m[2])
    w = (x1 * x2, y1 * x2, y2)
    if _dot(_cross(u1, u2), w) < 0:
        u1, u2 = u2, u1
    if abs(_dot(_cross(u1, u2), w)) != 1:
        raise GeometryError(f"plane basis search failed for {m}")
    return u1, u2, w


def _frac(x: Fraction) -> Fraction:
    return x - math.floor(x)


@lru_cache(maxsize=1 << 16)
def _slab_layout(space_group: int, n_atoms: int, miller: tuple, offset: Fraction, face_top: bool, n_layers: int):
    """Lattice-independent slab layout.

    Returns in-plane fractional coordinates, heights above the slab bottom in
    units of the interplanar spacing, and each site's Miller-plane coordinate
    ``h*x + k*y + l*z`` (exact rationals converted to float at the end).
    """
    u1, u2, w = plane_basis(miller)
    m = miller
    mm = _dot(m, m)
    g = _dot(m, w)
    # C has columns u1, u2, w; coefficients of a vector in that basis via the adjugate (det C = 1).
    c_inv = [_cross(u2, w), _cross(w, u1), _cross(u1, u2)]
    # in-plane part of w: w - (w.m / m.m) m = aw*u1 + bw*u2
    w_par = [Fraction(wi) - Fraction(g * mi, mm) for wi, mi in zip(w, m)]
    g11, g12, g22 = _dot(u1, u1), _dot(u1, u2), _dot(u2, u2)
    r1, r2 = _dot(u1, w_par), _dot(u2, w_par)
    det2 = g11 * g22 - g12 * g12
    aw = (r1 * g22 - r2 * g12) / det2
    bw = (r2 * g11 - r1 * g12) / det2
    if face_top:
        lo, hi = offset - n_layers, offset  # (lo, hi]
    else:
        lo, hi = offset, offset + n_layers  # [lo, hi)
    rows = []
    for site, b in enumerate(basis_positions(space_group, n_atoms)):
        b1, b2, b3 = (sum(Fraction(ci[j]) * b[j] for j in range(3)) for ci in c_inv)
        # p = g*(k + b3) for integer k
        k_min = math.floor(lo / g - b3) - 1
        k_max = math.ceil(hi / g - b3) + 1
        for k in range(k_min, k_max + 1):
            p = g * (k + b3)
            inside = lo < p <= hi if face_top else lo <= p < hi
            if not inside:
                continue
            t = k + b3
            fa = _frac(b1 + t * aw)
            fb = _frac(b2 + t * bw)
            height = p - lo if face_top else hi - p
            rows.append((float(height), float(fa), float(fb), float(p), site))
    rows.sort()
    arr = np.array([r[:4] for r in rows], dtype=np.float64).reshape(-1, 4)
    sites = np.array([r[4] for r in rows], dtype=int)
    for a in (arr, sites):
        a.setflags(write=False)
    return arr, sites


@dataclass(frozen=True)
class Slab:
    cell: np.ndarray  # (2, 3) in-plane periodic vectors, Cartesian A
    normal: np.ndarray  # unit surface normal
    symbols: tuple
    positions: np.ndarray  # (n, 3) Cartesian A; normal component in [0, thickness]
    thickness: float
    miller: tuple
    offset: float
    face_top: bool
    n_layers: int
    plane_coords: np.ndarray = field(default=None, repr=False)  # h*x+k*y+l*z of each bulk site
    sites: np.ndarray = field(default=None, repr=False)  # basis-site index of each atom

    def __len__(self) -> int:
        return len(self.symbols)

    @property
    def heights(self) -> np.ndarray:
        return self.positions @ self.normal

    def in_plane_fractional(self) -> np.ndarray:
        gram = self.cell @ self.cell.T
        return np.linalg.solve(gram, self.cell @ self.positions.T).T


def effective_layers(a: float, miller, n_layers: int, min_thickness: float) -> int:
    """Layer count covering ``n_layers`` spacings and ``min_thickness``.

    For a non-primitive triple (gcd g > 1) only every g-th spacing can hold
    atoms, so the count is rounded up to a multiple of g. Every window of that
    length then holds the same number of occupied planes whatever the offset
    or face.
    """
    m = _check_miller(miller)
    d = d_spacing(a, m)
    n = max(int(n_layers), math.ceil(min_thickness / d - 1e-9))
    g = math.gcd(math.gcd(abs(m[0]), abs(m[1])), abs(m[2]))
    return -(-n // g) * g


def cut_slab(
    relaxed,
    miller,
    offset: float,
    face_top: bool,
    n_layers: int = 4,
    min_thickness: float = 8.0,
) -> Slab:
    """Cut a slab from a relaxed cubic bulk.

    The cut plane is the Miller plane at ``offset`` (in units of the
    interplanar spacing). ``face_top`` keeps the material below the cut so the
    cut is the exposed upper face; otherwise the material above the cut is
    mirrored through the cut plane. Thickness is ``n_layers`` spacings, raised
    to cover ``min_thickness``.
    """
    m = _check_miller(miller)
    if not 0.0 <= offset < 1.0:
        raise GeometryError(f"offset must lie in [0, 1) (got {offset})")
    bulk = relaxed.relaxed_bulk() if isinstance(relaxed, RelaxedStructure) else relaxed
    a = bulk.lattice_a
    d = d_spacing(a, m)
    n_eff = effective_layers(a, m, n_layers, min_thickness)
    layout, sites = _slab_layout(bulk.space_group, bulk.n_atoms, m, Fraction(offset), bool(face_top), n_eff)
    u1, u2, _ = plane_basis(m)
    cell = a * np.array([u1, u2], dtype=np.float64)
    normal = np.array(m, dtype=np.float64) / math.sqrt(_dot(m, m))
    positions = layout[:, 1:2] * cell[0] + layout[:, 2:3] * cell[1] + (layout[:, 0:1] * d) * normal
    return Slab(
        cell=cell,
        normal=normal,
        symbols=(bulk.element,) * len(layout),
        positions=positions,
        thickness=n_eff * d,
        miller=m,
        offset=float(offset),
        face_top=bool(face_top),
        n_layers=n_eff,
        plane_coords=layout[:, 3].copy(),
        sites=sites.copy(),
    )


def measured_layer_spacing(slab: Slab) -> tuple:
    """Fit atom heights against their Miller-plane coordinates.

    Every atom sits on the lattice plane ``h*x + k*y + l*z = p``; the slope of
    height versus ``p`` is the spacing between successive planes. Returns
    ``(spacing, max_residual)``.
    """
    p = slab.plane_coords
    z = slab.heights
    if len(np.unique(p)) < 2:
        raise GeometryError("need atoms on at least two lattice planes")
    pc, zc = p - p.mean(), z - z.mean()
    slope = float(pc @ zc / (pc @ pc))
    resid = zc - slope * pc
    return abs(slope), float(np.max(np.abs(resid)))


def atomic_plane_heights(slab: Slab, tol: float = 1e-6) -> np.ndarray:
    """Distinct heights of occupied atomic planes, ascending."""
    z = np.sort(slab.heights)
    keep = np.concatenate([[True], np.diff(z) > tol])
    return z[keep]


# -- neighbour lists ------------------------------------------------------------


class Edges(NamedTuple):
    i: np.ndarray
    j: np.ndarray
    shifts: np.ndarray  # (k, 2) integer image shift applied to atom j
    distances: np.ndarray

    def __len__(self) -> int:
        return len(self.i)

    def as_set(self) -> set:
        return {
            (int(a), int(b), int(s0), int(s1), float(d))
            for a, b, (s0, s1), d in zip(self.i, self.j, self.shifts, self.distances)
        }


_BIN_OFFSETS = np.array(list(itertools.product((-1, 0, 1), repeat=3)), dtype=np.int64)
SHIFTS = np.array([(a, b) for a in (-1, 0, 1) for b in (-1, 0, 1)], dtype=int)


def _shift_vectors(cell: np.ndarray) -> np.ndarray:
    return SHIFTS[:, 0:1] * cell[0] + SHIFTS[:, 1:2] * cell[1]


def _canonical(i, j, shifts):
    """Undirected convention: i < j, or i == j with a lexicographically positive shift."""
    pos = (shifts[:, 0] > 0) | ((shifts[:, 0] == 0) & (shifts[:, 1] > 0))
    return (i < j) | ((i == j) & pos)


def _sorted_edges(i, j, shifts, dist) -> Edges:
    order = np.lexsort((shifts[:, 1], shifts[:, 0], j, i))
    return Edges(i[order], j[order], shifts[order], dist[order])


DENSE_LIMIT = 200  # below this many atoms the all-pairs path is faster


def _empty_edges() -> Edges:
    return Edges(np.zeros(0, int), np.zeros(0, int), np.zeros((0, 2), int), np.zeros(0))


def neighbor_list(positions: np.ndarray, cell: np.ndarray, cutoff: float, method: str = "auto") -> Edges:
    """All pairs within ``cutoff`` using in-plane images shifted by {-1, 0, 1}^2.

    ``method="cell"`` bins images into cubes of side ``cutoff`` and tests each
    atom against the 27 surrounding bins. ``"dense"`` evaluates every
    (atom, image) distance at once. ``"auto"`` picks dense for small slabs.
    Both paths return identical, sorted edges.
    """
    if not cutoff > 0:
        raise GeometryError(f"cutoff must be positive (got {cutoff})")
    if method not in ("auto", "cell", "dense"):
        raise GeometryError(f"unknown neighbour-list method {method!r}")
    P = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    n = len(P)
    if n == 0:
        return _empty_edges()
    sv = _shift_vectors(np.asarray(cell, dtype=np.float64))
    if method == "dense" or (method == "auto" and n <= DENSE_LIMIT):
        return _dense_neighbors(P, sv, cutoff)
    return _cell_neighbors(P, sv, cutoff)


def _dense_neighbors(P: np.ndarray, sv: np.ndarray, cutoff: float) -> Edges:
    n = len(P)
    # diff[s, i, j] = P[j] + sv[s] - P[i]
    diff = (P[None, None, :, :] + sv[:, None, None, :]) - P[None, :, None, :]
    d2 = np.einsum("sijk,sijk->sij", diff, diff)
    # loose prefilter; the exact test below matches the cell path bitwise
    s_idx, i, j = np.nonzero(d2 <= cutoff * cutoff * (1.0 + 1e-9))
    shifts = SHIFTS[s_idx]
    keep = _canonical(i, j, shifts)
    s_idx, i, j, shifts = s_idx[keep], i[keep], j[keep], shifts[keep]
    if len(i) == 0:
        return _empty_edges()
    dd = diff[s_idx, i, j]
    dist = np.sqrt((dd * dd).sum(axis=1))
    within = dist <= cutoff
    return _sorted_edges(i[within], j[within], shifts[within], dist[within])


def _cell_neighbors(P: np.ndarray, sv: np.ndarray, cutoff: float) -> Edges:
    n = len(P)
    empty = _empty_edges()
    Q = (P[None, :, :] + sv[:, None, :]).reshape(-1, 3)
    q_atom = np.tile(np.arange(n), len(SHIFTS))
    q_shift = np.repeat(np.arange(len(SHIFTS)), n)
    origin = Q.min(axis=0)
    qb = np.floor((Q - origin) / cutoff).astype(np.int64)
    dims = qb.max(axis=0) + 1
    qkey = (qb[:, 0] * dims[1] + qb[:, 1]) * dims[2] + qb[:, 2]
    order = np.argsort(qkey, kind="stable")
    skeys = qkey[order]
    pb = qb[4 * n : 5 * n]  # SHIFTS[4] == (0, 0)
    nb = (pb[:, None, :] + _BIN_OFFSETS[None, :, :]).reshape(-1, 3)
    ok = np.all((nb >= 0) & (nb < dims), axis=1)
    atoms = np.repeat(np.arange(n), len(_BIN_OFFSETS))[ok]
    nb = nb[ok]
    keys = (nb[:, 0] * dims[1] + nb[:, 1]) * dims[2] + nb[:, 2]
    start = np.searchsorted(skeys, keys, side="left")
    counts = np.searchsorted(skeys, keys, side="right") - start
    total = int(counts.sum())
    if total == 0:
        return empty
    i = np.repeat(atoms, counts)
    base = np.repeat(start - (np.cumsum(counts) - counts), counts)
    q = order[base + np.arange(total)]
    j = q_atom[q]
    shifts = SHIFTS[q_shift[q]]
    keep = _canonical(i, j, shifts)
    i, q, j, shifts = i[keep], q[keep], j[keep], shifts[keep]
    diff = Q[q] - P[i]
    dist = np.sqrt((diff * diff).sum(axis=1))
    within = dist <= cutoff
    return _sorted_edges(i[within], j[within], shifts[within], dist[within])


def neighbor_list_bruteforce(positions: np.ndarray, cell: np.ndarray, cutoff: float) -> Edges:
    """Reference O(9 n^2) neighbour search."""
    P = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    sv = _shift_vectors(np.asarray(cell, dtype=np.float64))
    out = []
    for i in range(len(P)):
        for j in range(len(P)):
            for s, (s0, s1) in enumerate(SHIFTS):
                if i == j and s0 == 0 and s1 == 0:
                    continue
                if not (i < j or (i == j and (s0 > 0 or (s0 == 0 and s1 > 0)))):
                    continue
                img = P[j] + sv[s]
                dx, dy, dz = img - P[i]
                d = math.sqrt(dx * dx + dy * dy + dz * dz)
                if d <= cutoff:
                    out.append((i, j, s0, s1, d))
    if not out:
        return Edges(np.zeros(0, int), np.zeros(0, int), np.zeros((0, 2), int), np.zeros(0))
    arr = np.array(out, dtype=object)
    return _sorted_edges(
        arr[:, 0].astype(int), arr[:, 1].astype(int), arr[:, 2:4].astype(int), arr[:, 4].astype(np.float64)
    )


# -- graphs -----------------------------------------------------------------------

SURFACE = "surface"
ADSORBATE = "adsorbate"

# Symbol and displacement (A, along x/y/normal) relative to the adsorption anchor.
HYDROGEN = (("H", (0.0, 0.0, 0.0)),)
ADSORBATES = {"H": HYDROGEN, "none": ()}
ADSORBATE_HEIGHT = 2.0


@dataclass(frozen=True)
class AtomGraph:
    symbols: tuple
    positions: np.ndarray
    tags: tuple  # SURFACE or ADSORBATE per node
    edges: Edges
    cell: np.ndarray
    normal: np.ndarray
    adsorbate: str = "H"
    info: dict = field(default_factory=dict)  # slab provenance: miller, offset, face, thickness

    @property
    def n_surface(self) -> int:
        return sum(t == SURFACE for t in self.tags)

    def directed_edges(self) -> list:
        """Both orientations of each undirected edge: ``(i, j, shift, distance)``."""
        out = []
        for a, b, s, d in zip(self.edges.i, self.edges.j, self.edges.shifts, self.edges.distances):
            out.append((int(a), int(b), (int(s[0]), int(s[1])), float(d)))
            out.append((int(b), int(a), (-int(s[0]), -int(s[1])), float(d)))
        return out


def to_graph(slab: Slab, adsorbate: str | Sequence = "H", cutoff: float = 6.0) -> AtomGraph:
    """Surface graph plus a disconnected adsorbate component.

    The adsorbate anchor sits ``ADSORBATE_HEIGHT`` above the topmost surface
    atom along the normal. No edge ever joins the two components.
    """
    if not cutoff > 0:
        raise GeometryError(f"cutoff must be positive (got {cutoff})")
    if isinstance(adsorbate, str):
        try:
            ads_atoms = ADSORBATES[adsorbate]
        except KeyError:
            raise GeometryError(f"unknown adsorbate {adsorbate!r}") from None
        name = adsorbate
    else:
        ads_atoms = tuple(adsorbate)
        name = "+".join(s for s, _ in ads_atoms) or "none"
    surf = neighbor_list(slab.positions, slab.cell, cutoff)
    n = len(slab)
    symbols = list(slab.symbols)
    positions = [slab.positions]
    if ads_atoms:
        top = int(np.argmax(slab.heights)) if n else 0
        anchor = (slab.positions[top] if n else np.zeros(3)) + ADSORBATE_HEIGHT * slab.normal
        disp = np.array([d for _, d in ads_atoms], dtype=np.float64)
        ads_pos = anchor + disp[:, 0:1] * np.array([1.0, 0, 0]) + disp[:, 1:2] * np.array([0, 1.0, 0]) + disp[:, 2:3] * slab.normal
        symbols.extend(s for s, _ in ads_atoms)
        positions.append(ads_pos)
        ia, ja, da = [], [], []
        for x in range(len(ads_pos)):
            for y in range(x + 1, len(ads_pos)):
                dist = float(np.linalg.norm(ads_pos[y] - ads_pos[x]))
                if dist <= cutoff:
                    ia.append(n + x)
                    ja.append(n + y)
                    da.append(dist)
        if ia:
            surf = Edges(
                np.concatenate([surf.i, ia]).astype(int),
                np.concatenate([surf.j, ja]).astype(int),
                np.concatenate([surf.shifts, np.zeros((len(ia), 2), int)]),
                np.concatenate([surf.distances, da]),
            )
    tags = (SURFACE,) * n + (ADSORBATE,) * len(ads_atoms)
    return AtomGraph(
        symbols=tuple(symbols),
        positions=np.concatenate(positions) if positions else np.zeros((0, 3)),
        tags=tags,
        edges=surf,
        cell=slab.cell,
        normal=slab.normal,
        adsorbate=name,
        info={
            "miller": " ".join(str(v) for v in slab.miller),
            "offset": slab.offset,
            "face": "top" if slab.face_top else "bottom",
            "thickness": slab.thickness,
            "n_layers": slab.n_layers,
        },
    )


# -- extended XYZ ------------------------------------------------------------------


def _fmt(values) -> str:
    return " ".join(repr(float(v)) for v in values)


def slab_to_xyz(slab: Slab, extra_atoms: Sequence = ()) -> str:
    """Extended XYZ text; ``extra_atoms`` (symbol, position) are appended with ``plane=nan``."""
    lattice = list(slab.cell[0]) + list(slab.cell[1]) + list(slab.thickness * slab.normal)
    header = (
        f'Lattice="{_fmt(lattice)}" Properties=species:S:1:pos:R:3:plane:R:1 pbc="T T F" '
        f'normal="{_fmt(slab.normal)}" thickness={slab.thickness!r} '
        f'miller="{slab.miller[0]} {slab.miller[1]} {slab.miller[2]}" offset={slab.offset!r} '
        f'face={"top" if slab.face_top else "bottom"} n_layers={slab.n_layers}'
    )
    lines = [str(len(slab) + len(extra_atoms)), header]
    plane = slab.plane_coords if slab.plane_coords is not None else np.full(len(slab), np.nan)
    for sym, pos, p in zip(slab.symbols, slab.positions, plane):
        lines.append(f"{sym} {_fmt(pos)} {float(p)!r}")
    for sym, pos in extra_atoms:
        lines.append(f"{sym} {_fmt(pos)} nan")
    return "\n".join(lines) + "\n"


def parse_xyz_header(line: str) -> dict:
    out = {}
    for tok in shlex.split(line):
        key, _, value = tok.partition("=")
        out[key] = value
    return out


def slab_from_xyz(text: str) -> Slab:
    lines = text.splitlines()
    try:
        n = int(lines[0])
        info = parse_xyz_header(lines[1])
        lattice = np.array([float(v) for v in info["Lattice"].split()]).reshape(3, 3)
        symbols, positions, plane = [], [], []
        for line in lines[2 : 2 + n]:
            parts = line.split()
            symbols.append(parts[0])
            positions.append([float(v) for v in parts[1:4]])
            plane.append(float(parts[4]) if len(parts) > 4 else np.nan)
    except (IndexError, KeyError, ValueError) as exc:
        raise GeometryError(f"malformed extended XYZ: {exc}") from exc
    if len(symbols) != n:
        raise GeometryError(f"expected {n} atoms, found {len(symbols)}")
    return Slab(
        cell=lattice[:2].copy(),
        normal=np.array([float(v) for v in info["normal"].split()]),
        symbols=tuple(symbols),
        positions=np.array(positions, dtype=np.float64).reshape(-1, 3),
        thickness=float(info["thickness"]),
        miller=tuple(int(v) for v in info["miller"].split()),
        offset=float(info["offset"]),
        face_top=info["face"] == "top",
        n_layers=int(info["n_layers"]),
        plane_coords=np.array(plane, dtype=np.float64),
    )


def graph_to_xyz(graph: AtomGraph) -> str:
    """Surface nodes of ``graph`` as extended XYZ (adsorbate nodes are omitted)."""
    info = graph.info
    idx = [k for k, t in enumerate(graph.tags) if t == SURFACE]
    lattice = list(graph.cell[0]) + list(graph.cell[1]) + list(info.get("thickness", 0.0) * graph.normal)
    header = f'Lattice="{_fmt(lattice)}" Properties=species:S:1:pos:R:3 pbc="T T F" normal="{_fmt(graph.normal)}"'
    for key in ("thickness", "miller", "offset", "face", "n_layers"):
        if key in info:
            value = repr(info[key]) if isinstance(info[key], float) else str(info[key])
            header += f" {key}={shlex.quote(value)}"
    lines = [str(len(idx)), header]
    for k in idx:
        lines.append(f"{graph.symbols[k]} {_fmt(graph.positions[k])}")
    return "\n".join(lines) + "\n"
