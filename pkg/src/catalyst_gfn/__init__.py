"""Reward-proportional generation of crystal-surface catalyst candidates.

A GFlowNet samples cubic crystal surfaces step by step. Each sample is
relaxed, cut into a slab, turned into an atom graph and scored by a
hydrogen-adsorption proxy.
"""

from .bulk import EnergyTable, build_bulk, classify_samples, filter_samples, relax
from .env import CrystalSurfaceSpec, CrystalSurfaceState, EnvConfig, Stage, SurfaceEnv
from .gflownet import TrainerConfig, enumerate_marginals, sample_batch, train
from .proxy import RewardConfig, TabularProxy, overpotential, reward
from .surface import cut_slab, neighbor_list, plane_basis, to_graph

__version__ = "0.1.0"
