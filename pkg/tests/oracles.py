"""Independent reference computations shared by the test modules."""

from __future__ import annotations

import math

import numpy as np

from catalyst_gfn.env import EnvConfig, SurfaceEnv
from catalyst_gfn.gflownet import batch_loss, gradient, sample_batch
from catalyst_gfn.policy import PolicyParams

# Proxy overpotential column of the HER results table (eV).
TABLE_ETA = {
    "Pt": 0.04, "Rh": 0.03, "Pd": 0.12, "Co": 0.16, "Ir": 0.14, "Mo": 0.21,
    "Cu": 0.39, "W": 0.30, "Nb": 0.35, "Ni": 0.32, "Au": 0.51, "Ag": 0.62,
}
# Space group kept per composition in the same table.
TABLE_SPACE_GROUP = {
    "Pt": 225, "Rh": 225, "Pd": 229, "Co": 225, "Ir": 225, "Mo": 229,
    "Cu": 225, "W": 229, "Nb": 229, "Ni": 229, "Au": 225, "Ag": 225,
}
TABLE_COUNTS = {"Pt": 185, "Rh": 144, "Pd": 54, "Co": 24, "Ir": 10, "Mo": 5, "Cu": 3}


def oracle_marginal(b: float = 100.0) -> dict:
    """Normalised exp(-b eta^2) over the table's overpotentials, in plain Python."""
    w = {e: math.exp(-b * eta * eta) for e, eta in TABLE_ETA.items()}
    total = math.fsum(w.values())
    return {e: v / total for e, v in w.items()}


def toy_env(elements=("Pt", "Rh"), n_lattice_bins=1, n_offset_bins=1, triples=((1, 0, 0),), faces=(True,),
            space_groups=(225, 229)):
    return SurfaceEnv(
        EnvConfig(
            elements=tuple(elements),
            space_groups=tuple(space_groups),
            n_lattice_bins=n_lattice_bins,
            n_offset_bins=n_offset_bins,
            miller_triples=tuple(triples),
            faces=tuple(faces),
        )
    )


def random_params(env: SurfaceEnv, hidden: int, rng: np.random.Generator, scale: float = 0.5) -> PolicyParams:
    n = PolicyParams.size(env.feature_dim, hidden, env.arities)
    flat = rng.uniform(-scale, scale, size=n)
    return PolicyParams(flat, env.feature_dim, hidden, env.arities)


def random_batch(env, params, rng, batch_size):
    batch = sample_batch(env, params, rng, batch_size, epsilon=0.3)
    for tr in batch:
        tr.reward = float(rng.uniform(0.05, 2.0))
    return batch


def finite_difference_errors(env, params, batch, h: float = 1e-5, floor: float = 1e-6) -> np.ndarray:
    """Relative error of the analytic gradient against central differences, per coordinate.

    The denominator is ``max(|analytic|, |numeric|, floor)``; ``floor`` keeps
    coordinates whose true gradient is (near) zero from dividing round-off by zero.
    """
    g = gradient(env, params, batch)
    base = params.flat
    num = np.empty_like(base)
    for k in range(base.size):
        up, down = base.copy(), base.copy()
        up[k] += h
        down[k] -= h
        num[k] = (batch_loss(env, params.with_flat(up), batch) - batch_loss(env, params.with_flat(down), batch)) / (2 * h)
    return np.abs(g - num) / np.maximum(np.maximum(np.abs(g), np.abs(num)), floor)


def grid_argmin(f, lo: float, hi: float, n: int = 1_000_001) -> float:
    """Argmin of ``f`` over an ``n``-point uniform grid on ``[lo, hi]`` (f must be vectorised)."""
    x = np.linspace(lo, hi, n)
    return float(x[int(np.argmin(f(x)))])


def grid_ols(x, y, span: float = 10.0, n: int = 201, rounds: int = 10) -> tuple:
    """Least-squares line by a zooming grid search over (slope, intercept).

    Each round evaluates the RSS on an ``n x n`` grid and recentres a grid
    fifty times narrower on the best point; RSS is convex, so the zoom is safe.
    """
    x, y = np.asarray(x, float), np.asarray(y, float)
    cs, ci = 0.0, float(y.mean())
    ws, wi = span, span * (1.0 + float(np.abs(x).max()))
    for _ in range(rounds):
        S, I = np.meshgrid(np.linspace(cs - ws, cs + ws, n), np.linspace(ci - wi, ci + wi, n), indexing="ij")
        rss = ((y - (S[..., None] * x + I[..., None])) ** 2).sum(axis=-1)
        k = np.unravel_index(np.argmin(rss), rss.shape)
        cs, ci = float(S[k]), float(I[k])
        ws, wi = ws / 50, wi / 50
    return cs, ci


# Experimental overpotentials marked as inferred from the j0 fit in the HER results table (eV).
TABLE_ETA_INFERRED = {"Rh": 0.071, "Pd": 0.036, "Co": 0.224, "Mo": 0.394, "W": 0.318, "Nb": 0.488}


def morse_cell_energy(a, a0, e_coh, n_atoms, d=1.0, alpha=2.0):
    """Vectorised Morse-shaped cell energy, written out independently of the package."""
    a = np.asarray(a, dtype=np.float64)
    return n_atoms * (e_coh + d * (1.0 - np.exp(-alpha * (a - a0))) ** 2)
