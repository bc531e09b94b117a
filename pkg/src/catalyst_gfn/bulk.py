"""Cubic bulk crystals, an analytic lattice energy, relaxation and stability filtering."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from fractions import Fraction
from importlib import resources
from typing import Sequence

from .env import ATOMS_PER_CELL, CrystalSurfaceSpec

HALF = Fraction(1, 2)
# Wyckoff 4a of Fm-3m and 2a of Im-3m in the conventional cell.
_BASES = {
    (225, 4): ((0, 0, 0), (0, HALF, HALF), (HALF, 0, HALF), (HALF, HALF, 0)),
    (229, 2): ((0, 0, 0), (HALF, HALF, HALF)),
}

RELAX_BOUNDS = (1.5, 7.0)
ENERGY_WINDOW = 0.05  # eV/atom above the per-composition minimum

KEPT = "kept"
DROPPED_ENERGY = "dropped-energy"
DROPPED_SPACEGROUP = "dropped-spacegroup"


class StructureError(ValueError):
    pass


def basis_positions(space_group: int, n_atoms: int) -> tuple:
    """Fractional coordinates (as ``Fraction`` triples) of the occupied Wyckoff site."""
    try:
        return _BASES[(int(space_group), int(n_atoms))]
    except KeyError:
        raise StructureError(
            f"no single-site basis for space group {space_group} with {n_atoms} atoms"
        ) from None


@dataclass(frozen=True)
class BulkStructure:
    element: str
    space_group: int
    lattice_a: float
    basis: tuple
    n_atoms: int

    @classmethod
    def from_spec(cls, spec: CrystalSurfaceSpec) -> "BulkStructure":
        return build_bulk(spec.element, spec.space_group, spec.lattice_a, spec.n_atoms)


def build_bulk(element: str, space_group: int, lattice_a: float, n_atoms: int | None = None) -> BulkStructure:
    if n_atoms is None:
        n_atoms = ATOMS_PER_CELL.get(space_group, 0)
    basis = basis_positions(space_group, n_atoms)
    if not lattice_a > 0:
        raise StructureError(f"lattice parameter must be positive (got {lattice_a})")
    return BulkStructure(element, int(space_group), float(lattice_a), basis, len(basis))


@dataclass(frozen=True)
class RelaxedStructure:
    bulk: BulkStructure  # starting structure; ``bulk.lattice_a`` is the unrelaxed value
    lattice_a: float
    total_energy: float
    formation_energy: float
    window: float
    converged: bool  # minimum is interior to the relaxation window

    @property
    def element(self) -> str:
        return self.bulk.element

    @property
    def space_group(self) -> int:
        return self.bulk.space_group

    @property
    def n_atoms(self) -> int:
        return self.bulk.n_atoms

    def relaxed_bulk(self) -> BulkStructure:
        return BulkStructure(self.element, self.space_group, self.lattice_a, self.bulk.basis, self.n_atoms)


@dataclass(frozen=True)
class EnergyTable:
    entries: dict  # (element, space_group) -> (a0, e_coh)
    d: float = 1.0
    alpha: float = 2.0

    def lookup(self, element: str, space_group: int) -> tuple:
        try:
            return self.entries[(element, int(space_group))]
        except KeyError:
            raise StructureError(f"no energy table entry for {element} in space group {space_group}") from None

    def preferred_space_group(self, element: str) -> int:
        options = [(e_coh, sg) for (el, sg), (_, e_coh) in self.entries.items() if el == element]
        if not options:
            raise StructureError(f"no energy table entry for {element}")
        return min(options)[1]

    @classmethod
    def from_json(cls, obj: dict) -> "EnergyTable":
        entries = {}
        for element, per_sg in obj.items():
            if element in ("d", "alpha"):
                continue
            for sg, vals in per_sg.items():
                entries[(element, int(sg))] = (float(vals["a0"]), float(vals["e_coh"]))
        return cls(entries, float(obj.get("d", 1.0)), float(obj.get("alpha", 2.0)))

    def to_json(self) -> dict:
        out = {"d": self.d, "alpha": self.alpha}
        for (element, sg), (a0, e_coh) in sorted(self.entries.items()):
            out.setdefault(element, {})[str(sg)] = {"a0": a0, "e_coh": e_coh}
        return out

    @classmethod
    def load(cls, path=None) -> "EnergyTable":
        if path is None:
            text = resources.files("catalyst_gfn.data").joinpath("energy_table.json").read_text()
        else:
            with open(path) as fh:
                text = fh.read()
        return cls.from_json(json.loads(text))


def lattice_energy(a: float, element: str, space_group: int, table: EnergyTable) -> float:
    """Total energy (eV) of one conventional cell with lattice parameter ``a``.

    Morse-shaped per atom: ``E_coh + D * (1 - exp(-alpha * (a - a0)))**2``.
    """
    if not a > 0:
        raise StructureError(f"lattice parameter must be positive (got {a})")
    a0, e_coh = table.lookup(element, space_group)
    n_atoms = ATOMS_PER_CELL[int(space_group)]
    x = 1.0 - math.exp(-table.alpha * (a - a0))
    return n_atoms * (e_coh + table.d * x * x)


INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


def golden_section_min(f, lo: float, hi: float, tol: float = 1e-6, max_iter: int = 200) -> float:
    """Minimise a unimodal ``f`` on ``[lo, hi]``; the endpoints are candidates too."""
    a, b = lo, hi
    c = b - INV_PHI * (b - a)
    d = a + INV_PHI * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if b - a <= tol:
            break
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - INV_PHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + INV_PHI * (b - a)
            fd = f(d)
    x = 0.5 * (a + b)
    best_x, best_f = x, f(x)
    for edge in (lo, hi):
        fe = f(edge)
        if fe < best_f:
            best_x, best_f = edge, fe
    return best_x


def relaxation_bounds(a_start: float, window: float) -> tuple:
    return max(a_start - window, RELAX_BOUNDS[0]), min(a_start + window, RELAX_BOUNDS[1])


def relax(structure, table: EnergyTable, window: float = 1.0, tol: float = 1e-6) -> RelaxedStructure:
    """Snap the lattice parameter to the energy minimum reachable from the start.

    The search is confined to ``[a_start - window, a_start + window]`` (and to
    the global bounds 1.5-7 A), so starts far from ``a0`` stop at the window
    edge. Relaxing a :class:`RelaxedStructure` keeps its original start as the
    window anchor.
    """
    if not window > 0:
        raise StructureError(f"relaxation window must be positive (got {window})")
    bulk = structure.bulk if isinstance(structure, RelaxedStructure) else structure
    lo, hi = relaxation_bounds(bulk.lattice_a, window)
    if lo >= hi:
        raise StructureError(f"starting lattice parameter {bulk.lattice_a} is outside the relaxation bounds")

    def energy(a):
        return lattice_energy(a, bulk.element, bulk.space_group, table)

    a_star = golden_section_min(energy, lo, hi, tol)
    total = energy(a_star)
    converged = lo + tol < a_star < hi - tol
    return RelaxedStructure(bulk, a_star, total, total / bulk.n_atoms, float(window), converged)


def classify_samples(structures: Sequence[RelaxedStructure], threshold: float = ENERGY_WINDOW) -> list:
    """Filter status of every structure, per composition (element).

    Rule 1 drops structures whose formation energy exceeds the composition's
    minimum by more than ``threshold``. Rule 2, on the survivors, keeps only the
    space group holding that minimum.
    """
    best = {}
    for s in structures:
        e = best.get(s.element)
        if e is None or s.formation_energy < e[0]:
            best[s.element] = (s.formation_energy, s.space_group)
    status = []
    for s in structures:
        e_min, sg_min = best[s.element]
        if s.formation_energy > e_min + threshold:
            status.append(DROPPED_ENERGY)
        elif s.space_group != sg_min:
            status.append(DROPPED_SPACEGROUP)
        else:
            status.append(KEPT)
    return status


def filter_samples(structures: Sequence[RelaxedStructure], threshold: float = ENERGY_WINDOW) -> list:
    status = classify_samples(structures, threshold)
    return [s for s, st in zip(structures, status) if st == KEPT]
