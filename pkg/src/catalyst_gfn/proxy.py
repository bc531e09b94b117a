"""Hydrogen-adsorption proxies, the overpotential reward and the j0 calibration fit."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from importlib import resources
from typing import Protocol, Sequence

import numpy as np

from .surface import SURFACE, AtomGraph


class ProxyError(ValueError):
    pass


class Proxy(Protocol):
    def predict_batch(self, graphs: Sequence[AtomGraph]) -> list: ...


@dataclass(frozen=True)
class RewardConfig:
    b: float = 100.0
    e_corr: float = -0.24

    def validate(self, prefix: str = "reward") -> list:
        errors = []
        if not isinstance(self.b, (int, float)) or not self.b > 0:
            errors.append(f"{prefix}.b: must be positive (got {self.b!r})")
        if not isinstance(self.e_corr, (int, float)) or not math.isfinite(self.e_corr):
            errors.append(f"{prefix}.e_corr: must be a finite number (got {self.e_corr!r})")
        return errors


def overpotential(e_h: float, config: RewardConfig = RewardConfig()) -> float:
    return e_h + config.e_corr


def reward(eta: float, config: RewardConfig = RewardConfig()) -> float:
    """``exp(-b * eta**2)``, in (0, 1] and even in ``eta``."""
    if not config.b > 0:
        raise ProxyError(f"reward sharpness b must be positive (got {config.b})")
    return math.exp(-config.b * eta * eta)


@dataclass(frozen=True)
class ProxyTable:
    e_h: dict  # element -> hydrogen adsorption free energy (eV)

    @classmethod
    def load(cls, path=None) -> "ProxyTable":
        if path is None:
            text = resources.files("catalyst_gfn.data").joinpath("her_proxy_table.json").read_text()
        else:
            with open(path) as fh:
                text = fh.read()
        obj = json.loads(text)
        return cls({str(k): float(v) for k, v in obj["e_h"].items()})

    def __getitem__(self, element: str) -> float:
        try:
            return self.e_h[element]
        except KeyError:
            raise ProxyError(f"no adsorption energy for element {element!r}") from None


class TabularProxy:
    """Adsorption energy looked up from the surface element; geometry is ignored."""

    def __init__(self, table: ProxyTable | None = None):
        self.table = table or ProxyTable.load()

    def predict(self, graph: AtomGraph) -> float:
        surface = {s for s, t in zip(graph.symbols, graph.tags) if t == SURFACE}
        if not surface:
            raise ProxyError("graph has no surface atoms")
        if len(surface) > 1:
            raise ProxyError(f"tabular proxy needs a single-element surface, got {sorted(surface)}")
        return self.table[surface.pop()]

    def predict_batch(self, graphs: Sequence[AtomGraph]) -> list:
        return [self.predict(g) for g in graphs]

    def element_rewards(self, elements: Sequence[str], config: RewardConfig = RewardConfig()) -> dict:
        return {e: reward(overpotential(self.table[e], config), config) for e in elements}


def predict_adsorption_energy(graph: AtomGraph, proxy: TabularProxy | None = None) -> float:
    return (proxy or TabularProxy()).predict(graph)


# -- calibration ----------------------------------------------------------------


@dataclass(frozen=True)
class CalibrationFit:
    slope: float
    intercept: float
    rss: float
    n: int

    def predict(self, log_j0) -> float | np.ndarray:
        return self.slope * np.asarray(log_j0, dtype=np.float64) + self.intercept


def fit_calibration(pairs: Sequence) -> CalibrationFit:
    """Ordinary least squares of overpotential on log10 exchange current density."""
    arr = np.asarray(pairs, dtype=np.float64).reshape(-1, 2)
    x, y = arr[:, 0], arr[:, 1]
    if len(np.unique(x)) < 2:
        raise ProxyError("calibration needs at least two pairs with distinct abscissae")
    xm, ym = x.mean(), y.mean()
    xc = x - xm
    slope = float(xc @ (y - ym) / (xc @ xc))
    intercept = float(ym - slope * xm)
    resid = y - (slope * x + intercept)
    return CalibrationFit(slope, intercept, float(resid @ resid), len(x))


def predict_overpotential(fit: CalibrationFit, log_j0: float) -> float:
    return float(fit.predict(log_j0))


def load_calibration_csv(path) -> list:
    """Rows ``(element, log10_j0, eta_exp)``; ``eta_exp`` may be blank for elements to predict."""
    rows = []
    with open(path, newline="") as fh:
        for lineno, rec in enumerate(csv.DictReader(fh), start=2):
            try:
                eta = rec.get("eta_exp", "").strip()
                rows.append((rec["element"].strip(), float(rec["log10_j0"]), float(eta) if eta else None))
            except (KeyError, ValueError, AttributeError) as exc:
                raise ProxyError(f"{path}:{lineno}: malformed calibration row ({exc})") from exc
    return rows


def calibrate_from_rows(rows: Sequence) -> tuple:
    """Fit on rows with a measured overpotential; predict the rest. Returns ``(fit, predictions)``."""
    fit = fit_calibration([(x, y) for _, x, y in rows if y is not None])
    return fit, {el: predict_overpotential(fit, x) for el, x, y in rows if y is None}
