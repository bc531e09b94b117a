"""End-to-end pipeline: reward path, sampling, filtering and the proportions report."""

from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from fractions import Fraction
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

from .bulk import KEPT, DROPPED_ENERGY, DROPPED_SPACEGROUP, EnergyTable, build_bulk, classify_samples, relax
from .config import RunConfig
from .env import CrystalSurfaceSpec, SurfaceEnv
from .external import ExternalProxy
from .gflownet import enumerate_marginals, sample_batch
from .policy import PolicyParams
from .proxy import ProxyTable, TabularProxy, overpotential, reward
from .surface import cut_slab, slab_to_xyz, to_graph

STATUSES = (KEPT, DROPPED_ENERGY, DROPPED_SPACEGROUP)
SAMPLE_BATCH = 256
_SAMPLE_STREAM = 0x5A


class PipelineError(RuntimeError):
    pass


# -- records ------------------------------------------------------------------------


@dataclass(frozen=True)
class SampleRecord:
    spec: CrystalSurfaceSpec
    lattice_a_relaxed: float
    formation_energy: float  # eV/atom
    e_h: float
    eta: float
    reward: float
    status: str | None = None  # filled in by the filter step

    @property
    def element(self) -> str:
        return self.spec.element

    @property
    def space_group(self) -> int:
        return self.spec.space_group

    def to_json(self) -> dict:
        out = {
            "spec": self.spec.to_json(),
            "lattice_a_relaxed": self.lattice_a_relaxed,
            "formation_energy": self.formation_energy,
            "e_h": self.e_h,
            "eta": self.eta,
            "reward": self.reward,
        }
        if self.status is not None:
            out["status"] = self.status
        return out

    def to_line(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)

    @classmethod
    def from_json(cls, obj: dict) -> "SampleRecord":
        status = obj.get("status")
        if status is not None and status not in STATUSES:
            raise ValueError(f"unknown status {status!r}")
        return cls(
            spec=CrystalSurfaceSpec.from_json(obj["spec"]),
            lattice_a_relaxed=float(obj["lattice_a_relaxed"]),
            formation_energy=float(obj["formation_energy"]),
            e_h=float(obj["e_h"]),
            eta=float(obj["eta"]),
            reward=float(obj["reward"]),
            status=status,
        )


def write_records(path, records: Iterable[SampleRecord]) -> int:
    n = 0
    with open(path, "w") as fh:
        for rec in records:
            fh.write(rec.to_line() + "\n")
            n += 1
    return n


def read_record_lines(path) -> list:
    """``(line text, record)`` pairs; malformed lines raise with their line number."""
    try:
        fh = open(path)
    except OSError as exc:
        raise PipelineError(f"cannot read samples file {path}: {exc.strerror}") from exc
    out = []
    with fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.rstrip("\n")
            if not text.strip():
                continue
            try:
                rec = SampleRecord.from_json(json.loads(text))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise PipelineError(f"{path}:{lineno}: malformed sample record ({exc})") from exc
            out.append((text, rec))
    return out


def read_records(path) -> list:
    return [rec for _, rec in read_record_lines(path)]


# -- reward path ------------------------------------------------------------------------


def make_proxy(config: RunConfig):
    if config.proxy.kind == "external":
        return ExternalProxy(config.proxy.resolved_command(), timeout=config.proxy.timeout)
    return TabularProxy(ProxyTable.load(config.proxy.table))


class RewardPipeline:
    """spec -> bulk -> relax -> cut -> graph -> proxy -> reward.

    Every stage is a pure function of the spec, so records are reproducible from
    their spec alone. Graph construction fans out over ``threads`` workers;
    proxy calls are batched.
    """

    def __init__(self, config: RunConfig | None = None, proxy=None, threads: int = 1):
        self.config = config or RunConfig()
        self.table = EnergyTable.load(self.config.relaxation.energy_table)
        self.proxy = proxy if proxy is not None else make_proxy(self.config)
        self.threads = max(1, int(threads))
        self._relax = lru_cache(maxsize=1 << 14)(self._relax_uncached)

    def _relax_uncached(self, element: str, space_group: int, n_atoms: int, lattice_a: float):
        bulk = build_bulk(element, space_group, lattice_a, n_atoms)
        return relax(bulk, self.table, window=self.config.relaxation.window)

    def relaxed(self, spec: CrystalSurfaceSpec):
        return self._relax(spec.element, spec.space_group, spec.n_atoms, spec.lattice_a)

    def graph(self, spec: CrystalSurfaceSpec):
        rc = self.config.relaxation
        slab = cut_slab(
            self.relaxed(spec), spec.miller, spec.offset, spec.face_top, n_layers=rc.n_layers, min_thickness=rc.min_thickness
        )
        return to_graph(slab, "H", cutoff=rc.cutoff)

    def _map(self, fn, items: Sequence) -> list:
        if self.threads == 1 or len(items) < 2:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(self.threads) as pool:
            return list(pool.map(fn, items))

    def records(self, specs: Sequence[CrystalSurfaceSpec]) -> list:
        specs = list(specs)
        graphs = self._map(self.graph, specs)
        e_h = self.proxy.predict_batch(graphs)
        rcfg = self.config.reward
        out = []
        for spec, e in zip(specs, e_h):
            r = self.relaxed(spec)
            eta = overpotential(e, rcfg)
            out.append(SampleRecord(spec, r.lattice_a, r.formation_energy, float(e), eta, reward(eta, rcfg)))
        return out

    def rewards(self, specs: Sequence[CrystalSurfaceSpec]) -> list:
        return [rec.reward for rec in self.records(specs)]

    def close(self) -> None:
        close = getattr(self.proxy, "close", None)
        if close is not None:
            close()


# -- sampling -------------------------------------------------------------------------


def worker_seeds(seed: int, threads: int) -> list:
    return np.random.SeedSequence([int(seed), _SAMPLE_STREAM]).spawn(int(threads))


def _split(n: int, parts: int) -> list:
    base, extra = divmod(n, parts)
    return [base + (k < extra) for k in range(parts)]


def sample_specs(env: SurfaceEnv, params: PolicyParams, n: int, seed: int, threads: int = 1) -> list:
    """``n`` terminal specs from the policy without exploration noise.

    Worker ``k`` draws its share from its own child seed; results are
    concatenated in worker order, so output depends on ``(seed, threads)`` only.
    """
    if n < 0:
        raise PipelineError(f"sample count must be non-negative (got {n})")
    threads = max(1, int(threads))

    def work(args):
        count, ss = args
        rng = np.random.default_rng(ss)
        specs = []
        while len(specs) < count:
            batch = sample_batch(env, params, rng, min(SAMPLE_BATCH, count - len(specs)), epsilon=0.0)
            specs.extend(tr.spec for tr in batch)
        return specs

    jobs = list(zip(_split(n, threads), worker_seeds(seed, threads)))
    if threads == 1:
        parts = [work(j) for j in jobs]
    else:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(work, jobs))
    return [s for part in parts for s in part]


# -- filtering -----------------------------------------------------------------------


def annotate(records: Sequence[SampleRecord], threshold: float) -> list:
    status = classify_samples(records, threshold)
    return [replace(r, status=s) for r, s in zip(records, status)]


def filter_file(path, kept_path, annotated_path, threshold: float) -> dict:
    """Write kept records (original lines, unchanged) and the fully annotated set."""
    pairs = read_record_lines(path)
    recs = annotate([rec for _, rec in pairs], threshold)
    with open(kept_path, "w") as kept_fh, open(annotated_path, "w") as ann_fh:
        for (text, _), rec in zip(pairs, recs):
            if rec.status == KEPT:
                kept_fh.write(text + "\n")
            ann_fh.write(rec.to_line() + "\n")
    counts = {s: 0 for s in STATUSES}
    for rec in recs:
        counts[rec.status] += 1
    return counts


# -- report ----------------------------------------------------------------------------


@dataclass(frozen=True)
class ReportRow:
    composition: str
    space_group: int
    proxy_overpotential: float
    count: int
    percentage: float


def largest_remainder_percentages(counts: Sequence[int], decimals: int = 2) -> list:
    """Percentages rounded to ``decimals`` that sum to exactly 100.

    Remainders are compared exactly; ties favour earlier entries.
    """
    total = sum(counts)
    if total <= 0:
        raise PipelineError("cannot compute percentages of an empty set")
    unit = 100 * 10**decimals
    quotas = [Fraction(c * unit, total) for c in counts]
    floors = [math.floor(q) for q in quotas]
    short = unit - sum(floors)
    order = sorted(range(len(counts)), key=lambda k: (-(quotas[k] - floors[k]), k))
    for k in order[:short]:
        floors[k] += 1
    return [f / 10**decimals for f in floors]


def build_report(records: Sequence[SampleRecord]) -> list:
    """Rows per (composition, space group) over kept records, by count then name."""
    groups = {}
    for rec in records:
        if rec.status not in (None, KEPT):
            continue
        groups.setdefault((rec.element, rec.space_group), []).append(rec.eta)
    if not groups:
        raise PipelineError("report needs at least one kept sample")
    keys = sorted(groups, key=lambda k: (-len(groups[k]), k[0], k[1]))
    counts = [len(groups[k]) for k in keys]
    pct = largest_remainder_percentages(counts)
    rows = []
    for (el, sg), c, p in zip(keys, counts, pct):
        # the mean over a sorted list is independent of record order
        rows.append(ReportRow(el, sg, math.fsum(sorted(groups[(el, sg)])) / c, c, p))
    return rows


REPORT_COLUMNS = ("composition", "space_group", "proxy_overpotential", "count", "percentage")


def report_csv(rows: Sequence[ReportRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in rows:
        w.writerow([r.composition, r.space_group, f"{r.proxy_overpotential:.4f}", r.count, f"{r.percentage:.2f}"])
    return buf.getvalue()


def read_report_csv(path) -> list:
    with open(path, newline="") as fh:
        return [
            ReportRow(d["composition"], int(d["space_group"]), float(d["proxy_overpotential"]), int(d["count"]),
                      float(d["percentage"]))
            for d in csv.DictReader(fh)
        ]


def report_svg(rows: Sequence[ReportRow], width: int = 640, bar_height: int = 22) -> str:
    """Horizontal bar chart of sample percentages, one bar per row."""
    left, right, top = 110, 70, 40
    plot_w = width - left - right
    height = top + bar_height * len(rows) + 30
    peak = max((r.percentage for r in rows), default=0.0) or 1.0
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
        f'<text x="{width / 2:.0f}" y="22" text-anchor="middle" font-size="14">Proportion of sampled structures (%)</text>',
    ]
    for k, r in enumerate(rows):
        y = top + k * bar_height
        w = plot_w * r.percentage / peak
        out.append(
            f'<text x="{left - 8}" y="{y + bar_height * 0.65:.1f}" text-anchor="end">{r.composition} ({r.space_group})</text>'
        )
        out.append(f'<rect x="{left}" y="{y + 3}" width="{w:.2f}" height="{bar_height - 6}" fill="#3b6ea5"/>')
        out.append(f'<text x="{left + w + 5:.2f}" y="{y + bar_height * 0.65:.1f}">{r.percentage:.2f}</text>')
    base = top + bar_height * len(rows)
    out.append(f'<line x1="{left}" y1="{top}" x2="{left}" y2="{base}" stroke="black"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_report(records: Sequence[SampleRecord], out_dir) -> list:
    rows = build_report(records)
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.csv"), "w") as fh:
        fh.write(report_csv(rows))
    with open(os.path.join(out_dir, "report.svg"), "w") as fh:
        fh.write(report_svg(rows))
    totals = {"count": sum(r.count for r in rows), "percentage": round(sum(r.percentage for r in rows), 2)}
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        json.dump({"rows": [r.__dict__ for r in rows], "totals": totals}, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return rows


# -- oracle and inspection -------------------------------------------------------------


def enumerate_config(config: RunConfig, uniform: bool = False):
    """Exact element marginals for the configured search space and tabular proxy."""
    if config.proxy.kind != "tabular":
        raise PipelineError("enumeration needs the tabular proxy; the reward must factorize through the element")
    env = SurfaceEnv(config.search_space)
    elements = config.search_space.elements
    if uniform:
        rewards = {e: 1.0 for e in elements}
    else:
        rewards = TabularProxy(ProxyTable.load(config.proxy.table)).element_rewards(elements, config.reward)
    return enumerate_marginals(env, element_rewards=rewards)


def cut_surface_xyz(element: str, space_group: int, lattice_a: float, miller, offset: float, face_top: bool,
                    n_layers: int = 4, min_thickness: float = 8.0) -> str:
    """Extended XYZ of an unrelaxed bulk cut; ``n_atoms`` follows the space group."""
    bulk = build_bulk(element, space_group, lattice_a)
    return slab_to_xyz(cut_slab(bulk, miller, offset, face_top, n_layers=n_layers, min_thickness=min_thickness))

