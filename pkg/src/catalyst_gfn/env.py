"""Sequential construction of a crystal-surface description.

The construction runs through a fixed stage order

    space group -> element -> atom count -> lattice bin -> h -> k -> l -> offset bin -> face

so every state has exactly one parent and the state graph is a tree.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field, replace
from typing import Iterator, Optional, Sequence

import numpy as np

HER_ELEMENTS = ("Pt", "Ag", "Au", "Pd", "Ir", "Ni", "W", "Co", "Cu", "Mo", "Rh", "Nb")
SPACE_GROUPS = (225, 229)
# Conventional-cell multiplicity of the single occupied Wyckoff site (4a of Fm-3m, 2a of Im-3m).
ATOMS_PER_CELL = {225: 4, 229: 2}
ATOM_COUNT_CHOICES = (2, 3, 4)
MILLER_VALUES = (-2, -1, 0, 1, 2)
_SG_INDEX = {sg: i for i, sg in enumerate(SPACE_GROUPS)}


class Stage(enum.IntEnum):
    SPACE_GROUP = 0
    ELEMENT = 1
    ATOM_COUNT = 2
    LATTICE = 3
    MILLER_H = 4
    MILLER_K = 5
    MILLER_L = 6
    OFFSET = 7
    FACE = 8
    TERMINAL = 9


N_STAGES = 9  # non-terminal stages, i.e. trajectory length
_NEXT = {s: Stage(s + 1) for s in list(Stage)[:-1]}


class EnvError(ValueError):
    pass


@dataclass(frozen=True)
class Action:
    """Choice of option ``index`` at ``stage``; ``index`` addresses the stage's action head."""

    stage: Stage
    index: int

    def __repr__(self) -> str:
        return f"Action({self.stage.name}, {self.index})"


@dataclass(frozen=True)
class CrystalSurfaceState:
    stage: Stage = Stage.SPACE_GROUP
    space_group: Optional[int] = None
    element: Optional[str] = None
    n_atoms: Optional[int] = None
    lattice_bin: Optional[int] = None
    miller: tuple = ()
    offset_bin: Optional[int] = None
    face_top: Optional[bool] = None

    @property
    def is_terminal(self) -> bool:
        return self.stage == Stage.TERMINAL

    def to_json(self) -> dict:
        return {
            "stage": self.stage.name,
            "space_group": self.space_group,
            "element": self.element,
            "n_atoms": self.n_atoms,
            "lattice_bin": self.lattice_bin,
            "miller": list(self.miller),
            "offset_bin": self.offset_bin,
            "face_top": self.face_top,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CrystalSurfaceState":
        return cls(
            stage=Stage[obj["stage"]],
            space_group=obj["space_group"],
            element=obj["element"],
            n_atoms=obj["n_atoms"],
            lattice_bin=obj["lattice_bin"],
            miller=tuple(obj["miller"]),
            offset_bin=obj["offset_bin"],
            face_top=obj["face_top"],
        )


@dataclass(frozen=True)
class CrystalSurfaceSpec:
    """Fully decoded terminal state."""

    space_group: int
    element: str
    n_atoms: int
    lattice_a: float
    miller: tuple
    offset: float
    face_top: bool

    def to_json(self) -> dict:
        return {
            "space_group": self.space_group,
            "element": self.element,
            "n_atoms": self.n_atoms,
            "lattice_a": self.lattice_a,
            "miller": list(self.miller),
            "offset": self.offset,
            "face_top": self.face_top,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CrystalSurfaceSpec":
        return cls(
            space_group=int(obj["space_group"]),
            element=str(obj["element"]),
            n_atoms=int(obj["n_atoms"]),
            lattice_a=float(obj["lattice_a"]),
            miller=tuple(int(v) for v in obj["miller"]),
            offset=float(obj["offset"]),
            face_top=bool(obj["face_top"]),
        )


def all_miller_triples(max_index: int = 2) -> tuple:
    rng = range(-max_index, max_index + 1)
    return tuple(t for t in itertools.product(rng, rng, rng) if t != (0, 0, 0))


@dataclass(frozen=True)
class EnvConfig:
    elements: tuple = HER_ELEMENTS
    space_groups: tuple = SPACE_GROUPS
    lattice_min: float = 2.0
    lattice_max: float = 6.0
    n_lattice_bins: int = 64
    n_offset_bins: int = 8
    # Restricting triples or faces only shrinks the support; head arities stay fixed.
    miller_triples: tuple = field(default_factory=all_miller_triples)
    faces: tuple = (False, True)

    def __post_init__(self):
        if not self.elements:
            raise EnvError("at least one element is required")
        if len(set(self.elements)) != len(self.elements):
            raise EnvError("duplicate elements")
        for sg in self.space_groups:
            if sg not in ATOMS_PER_CELL:
                raise EnvError(f"unsupported space group {sg}; only 225 and 229 are implemented")
        if not self.space_groups:
            raise EnvError("at least one space group is required")
        if not 0 < self.lattice_min < self.lattice_max:
            raise EnvError("lattice bounds must satisfy 0 < min < max")
        if self.n_lattice_bins < 1 or self.n_offset_bins < 1:
            raise EnvError("bin counts must be positive")
        triples = tuple(tuple(int(v) for v in t) for t in self.miller_triples)
        for t in triples:
            if len(t) != 3 or t == (0, 0, 0) or any(v not in MILLER_VALUES for v in t):
                raise EnvError(f"invalid Miller triple {t}")
        if not triples:
            raise EnvError("at least one Miller triple is required")
        object.__setattr__(self, "miller_triples", triples)
        if not self.faces or any(f not in (False, True) for f in self.faces):
            raise EnvError("faces must be a non-empty subset of (False, True)")

    def to_json(self) -> dict:
        out = {
            "elements": list(self.elements),
            "space_groups": list(self.space_groups),
            "lattice_min": self.lattice_min,
            "lattice_max": self.lattice_max,
            "n_lattice_bins": self.n_lattice_bins,
            "n_offset_bins": self.n_offset_bins,
            "faces": list(self.faces),
        }
        if set(self.miller_triples) != set(all_miller_triples()):
            out["miller_triples"] = [list(t) for t in self.miller_triples]
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "EnvConfig":
        kw = dict(obj)
        for key in ("elements", "space_groups", "faces"):
            if key in kw:
                kw[key] = tuple(kw[key])
        if "miller_triples" in kw:
            kw["miller_triples"] = tuple(tuple(t) for t in kw["miller_triples"])
        return cls(**kw)


class SurfaceEnv:
    """Deterministic MDP over crystal-surface descriptions.

    All methods are pure; an instance only caches layout information derived
    from its :class:`EnvConfig`.
    """

    def __init__(self, config: EnvConfig | None = None):
        self.config = config or EnvConfig()
        c = self.config
        self._triples = frozenset(c.miller_triples)
        self._prefixes = {
            n: frozenset(t[:n] for t in c.miller_triples) for n in (1, 2, 3)
        }
        self.arities = (
            len(SPACE_GROUPS),
            len(c.elements),
            len(ATOM_COUNT_CHOICES),
            c.n_lattice_bins,
            len(MILLER_VALUES),
            len(MILLER_VALUES),
            len(MILLER_VALUES),
            c.n_offset_bins,
            2,
        )
        # Feature blocks: stage one-hot followed by one block per choice.
        blocks = [N_STAGES + 1, *self.arities]
        self._block_starts = np.concatenate([[0], np.cumsum(blocks)[:-1]]).astype(int)
        self._starts = [int(v) for v in self._block_starts]
        self.feature_dim = int(sum(blocks))
        self._element_index = {e: i for i, e in enumerate(c.elements)}
        self._build_masks()

    # -- basic MDP -------------------------------------------------------

    def initial_state(self) -> CrystalSurfaceState:
        return CrystalSurfaceState()

    def arity(self, stage: Stage) -> int:
        if stage == Stage.TERMINAL:
            raise EnvError("terminal stage has no actions")
        return self.arities[stage]

    def valid_actions(self, state: CrystalSurfaceState) -> np.ndarray:
        """Boolean mask over the action head of ``state.stage`` (read-only array)."""
        stage = state.stage
        if stage == Stage.TERMINAL:
            raise EnvError("no actions are available in a terminal state")
        if stage == Stage.ATOM_COUNT:
            return self._atom_masks[state.space_group]
        if Stage.MILLER_H <= stage <= Stage.MILLER_L:
            return self._miller_masks[state.miller]
        return self._stage_masks[stage]

    def _build_masks(self):
        c = self.config

        def frozen(values):
            a = np.array(values, dtype=bool)
            a.setflags(write=False)
            return a

        self._stage_masks = {
            Stage.SPACE_GROUP: frozen([sg in c.space_groups for sg in SPACE_GROUPS]),
            Stage.ELEMENT: frozen([True] * len(c.elements)),
            Stage.LATTICE: frozen([True] * c.n_lattice_bins),
            Stage.OFFSET: frozen([True] * c.n_offset_bins),
            Stage.FACE: frozen([False in c.faces, True in c.faces]),
        }
        self._atom_masks = {
            sg: frozen([n == ATOMS_PER_CELL[sg] for n in ATOM_COUNT_CHOICES]) for sg in SPACE_GROUPS
        }
        self._miller_masks = {}
        for depth in (0, 1, 2):
            prefixes = {t[:depth] for t in c.miller_triples}
            for prefix in prefixes:
                self._miller_masks[prefix] = frozen(
                    [prefix + (v,) in self._prefixes[depth + 1] for v in MILLER_VALUES]
                )

    def apply(self, state: CrystalSurfaceState, action: Action) -> CrystalSurfaceState:
        s = state.stage
        if s == Stage.TERMINAL:
            raise EnvError("cannot act in a terminal state")
        if action.stage != s:
            raise EnvError(
                f"action for stage {action.stage.name} applied at stage {s.name}"
            )
        mask = self.valid_actions(state)
        i = action.index
        if not 0 <= i < len(mask) or not mask[i]:
            raise EnvError(f"{action!r} is masked in state at stage {s.name}")
        nxt = _NEXT[s]
        sg, el, n, lat, mil, off = (
            state.space_group, state.element, state.n_atoms, state.lattice_bin, state.miller, state.offset_bin,
        )
        face = None
        if s == Stage.SPACE_GROUP:
            sg = SPACE_GROUPS[i]
        elif s == Stage.ELEMENT:
            el = self.config.elements[i]
        elif s == Stage.ATOM_COUNT:
            n = ATOM_COUNT_CHOICES[i]
        elif s == Stage.LATTICE:
            lat = i
        elif s <= Stage.MILLER_L:
            mil = mil + (MILLER_VALUES[i],)
        elif s == Stage.OFFSET:
            off = i
        else:
            face = bool(i)
        return CrystalSurfaceState(nxt, sg, el, n, lat, mil, off, face)

    def parent(self, state: CrystalSurfaceState) -> tuple:
        """Return ``(parent_state, action)`` such that ``apply`` reproduces ``state``."""
        s = state.stage
        if s == Stage.SPACE_GROUP:
            raise EnvError("the initial state has no parent")
        prev = Stage(s - 1)
        if prev == Stage.SPACE_GROUP:
            return replace(state, stage=prev, space_group=None), Action(
                prev, SPACE_GROUPS.index(state.space_group)
            )
        if prev == Stage.ELEMENT:
            return replace(state, stage=prev, element=None), Action(
                prev, self._element_index[state.element]
            )
        if prev == Stage.ATOM_COUNT:
            return replace(state, stage=prev, n_atoms=None), Action(
                prev, ATOM_COUNT_CHOICES.index(state.n_atoms)
            )
        if prev == Stage.LATTICE:
            return replace(state, stage=prev, lattice_bin=None), Action(prev, state.lattice_bin)
        if prev in (Stage.MILLER_H, Stage.MILLER_K, Stage.MILLER_L):
            return replace(state, stage=prev, miller=state.miller[:-1]), Action(
                prev, MILLER_VALUES.index(state.miller[-1])
            )
        if prev == Stage.OFFSET:
            return replace(state, stage=prev, offset_bin=None), Action(prev, state.offset_bin)
        return replace(state, stage=prev, face_top=None), Action(prev, int(state.face_top))

    # -- features --------------------------------------------------------

    def encode(self, state: CrystalSurfaceState) -> np.ndarray:
        out = np.zeros(self.feature_dim)
        self.encode_into(state, out)
        return out

    def encode_into(self, state: CrystalSurfaceState, out: np.ndarray) -> None:
        """Write the one-hot encoding of ``state`` into a zeroed row ``out``."""
        b = self._starts
        out[b[0] + int(state.stage)] = 1.0
        if state.space_group is not None:
            out[b[1] + _SG_INDEX[state.space_group]] = 1.0
        if state.element is not None:
            out[b[2] + self._element_index[state.element]] = 1.0
        if state.n_atoms is not None:
            out[b[3] + state.n_atoms - ATOM_COUNT_CHOICES[0]] = 1.0
        if state.lattice_bin is not None:
            out[b[4] + state.lattice_bin] = 1.0
        for axis, v in enumerate(state.miller):
            out[b[5 + axis] + v + 2] = 1.0
        if state.offset_bin is not None:
            out[b[8] + state.offset_bin] = 1.0
        if state.face_top is not None:
            out[b[9] + int(state.face_top)] = 1.0

    # -- terminal decoding and counting ------------------------------------

    def lattice_value(self, lattice_bin: int) -> float:
        c = self.config
        return c.lattice_min + (lattice_bin + 0.5) * (c.lattice_max - c.lattice_min) / c.n_lattice_bins

    def offset_value(self, offset_bin: int) -> float:
        return (offset_bin + 0.5) / self.config.n_offset_bins

    def decode_terminal(self, state: CrystalSurfaceState) -> CrystalSurfaceSpec:
        if not state.is_terminal:
            raise EnvError(f"cannot decode a state at stage {state.stage.name}")
        return CrystalSurfaceSpec(
            space_group=state.space_group,
            element=state.element,
            n_atoms=state.n_atoms,
            lattice_a=self.lattice_value(state.lattice_bin),
            miller=state.miller,
            offset=self.offset_value(state.offset_bin),
            face_top=state.face_top,
        )

    def terminal_states_per_element(self) -> int:
        c = self.config
        # every allowed space group forces exactly one atom count
        return (
            len(c.space_groups)
            * c.n_lattice_bins
            * len(c.miller_triples)
            * c.n_offset_bins
            * len(c.faces)
        )

    def count_terminal_states(self) -> int:
        return len(self.config.elements) * self.terminal_states_per_element()

    def iter_states(self) -> Iterator[CrystalSurfaceState]:
        """Depth-first walk over every reachable state, root first."""
        stack = [self.initial_state()]
        while stack:
            state = stack.pop()
            yield state
            if state.is_terminal:
                continue
            mask = self.valid_actions(state)
            for i in np.flatnonzero(mask)[::-1]:
                stack.append(self.apply(state, Action(state.stage, int(i))))

    def iter_terminal_states(self) -> Iterator[CrystalSurfaceState]:
        return (s for s in self.iter_states() if s.is_terminal)

    def trajectory_to(self, state: CrystalSurfaceState) -> list:
        """Unique ``(state, action)`` path from the root to ``state``."""
        path = []
        while state.stage != Stage.SPACE_GROUP:
            state, action = self.parent(state)
            path.append((state, action))
        return path[::-1]


def action_from_value(env: SurfaceEnv, stage: Stage, value) -> Action:
    """Build an action from a human-level value (space group number, element symbol, ...)."""
    if stage == Stage.SPACE_GROUP:
        return Action(stage, SPACE_GROUPS.index(value))
    if stage == Stage.ELEMENT:
        return Action(stage, env.config.elements.index(value))
    if stage == Stage.ATOM_COUNT:
        return Action(stage, ATOM_COUNT_CHOICES.index(value))
    if stage in (Stage.MILLER_H, Stage.MILLER_K, Stage.MILLER_L):
        return Action(stage, MILLER_VALUES.index(value))
    if stage == Stage.FACE:
        return Action(stage, int(bool(value)))
    return Action(stage, int(value))


def build_state(env: SurfaceEnv, values: Sequence) -> CrystalSurfaceState:
    """Apply a sequence of human-level values from the root."""
    state = env.initial_state()
    for v in values:
        state = env.apply(state, action_from_value(env, state.stage, v))
    return state
