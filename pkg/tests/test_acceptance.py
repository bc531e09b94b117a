"""Acceptance criteria 1-10, one or more ``test_criterion_<N>_*`` tests each.

Criteria 2, 3, 4 and 10 share one default training run (seed 7) from the
session fixture in conftest.py; it takes a couple of minutes on one core.
"""

import csv
import math
import os
from collections import Counter
from dataclasses import replace

import numpy as np
import pytest

from catalyst_gfn import cli
from catalyst_gfn.bulk import (
    DROPPED_ENERGY,
    DROPPED_SPACEGROUP,
    KEPT,
    EnergyTable,
    build_bulk,
    classify_samples,
    lattice_energy,
    relax,
    relaxation_bounds,
)
from catalyst_gfn.config import RunConfig
from catalyst_gfn.env import HER_ELEMENTS, EnvConfig, SurfaceEnv, all_miller_triples
from catalyst_gfn.gflownet import enumerate_marginals, load_checkpoint
from catalyst_gfn.pipeline import RewardPipeline, enumerate_config, read_records, read_report_csv, sample_specs
from catalyst_gfn.proxy import calibrate_from_rows, fit_calibration, load_calibration_csv, reward
from catalyst_gfn.surface import (
    cut_slab,
    d_spacing,
    measured_layer_spacing,
    neighbor_list,
    neighbor_list_bruteforce,
    plane_basis,
)

from oracles import (
    TABLE_ETA,
    TABLE_ETA_INFERRED,
    TABLE_SPACE_GROUP,
    finite_difference_errors,
    grid_argmin,
    grid_ols,
    morse_cell_energy,
    random_batch,
    random_params,
    toy_env,
)

CALIBRATION_CSV_ENV = "CATALYST_GFN_CALIBRATION_CSV"


@pytest.fixture(scope="module")
def table():
    return EnergyTable.load()


def exact_marginal():
    return enumerate_config(RunConfig())


# -- 1 ---------------------------------------------------------------------------


def test_criterion_1_reward_formula():
    assert abs(reward(0.04) - 0.852144) <= 1e-6
    assert abs(reward(0.04) - math.exp(-0.16)) <= 1e-15
    assert reward(0.0) == 1.0
    etas = np.random.default_rng(1).uniform(-1, 1, 1000)
    assert all(reward(e) == reward(-e) for e in etas)


# -- 2 ---------------------------------------------------------------------------


def test_criterion_2_sampling_matches_exact_marginal(default_run, acceptance_note):
    state, _, _ = load_checkpoint(default_run / "checkpoint.json")
    env = SurfaceEnv()
    specs = sample_specs(env, state.params, 10_000, seed=7)
    counts = Counter(s.element for s in specs)
    exact = exact_marginal().element_probs
    l1 = sum(abs(counts[e] / 10_000 - p) for e, p in exact.items())
    acceptance_note(2, f"L1 = {l1:.4f}")
    assert l1 <= 0.05


# -- 3 ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def filtered_report(default_run, tmp_path_factory):
    d = tmp_path_factory.mktemp("report_run")
    ckpt = str(default_run / "checkpoint.json")
    common = ["--seed", "7", "--out-dir", str(d)]
    assert cli.main(["sample", "-n", "1000", "--checkpoint", ckpt, *common]) == 0
    assert cli.main(["filter", *common]) == 0
    assert cli.main(["report", *common]) == 0
    return d


def test_criterion_3_report_consistent_with_table(filtered_report, acceptance_note):
    rows = read_report_csv(filtered_report / "report.csv")
    assert len(read_records(filtered_report / "samples.jsonl")) == 1000
    pct = {r.composition: r.percentage for r in rows}
    kept = sum(r.count for r in rows)
    acceptance_note(3, f"{kept} kept; Pt+Rh = {pct.get('Pt', 0) + pct.get('Rh', 0):.2f}%")
    # (a) Pt and Rh lead, jointly at least 70 %
    assert {rows[0].composition, rows[1].composition} == {"Pt", "Rh"}
    assert pct["Pt"] + pct["Rh"] >= 70.0
    # (b) poor catalysts stay below 1 %
    for el, eta in TABLE_ETA.items():
        if eta >= 0.30:
            assert pct.get(el, 0.0) < 1.0, el
    # (c) kept space groups follow the table, Pd included
    for r in rows:
        assert r.space_group == TABLE_SPACE_GROUP[r.composition], r
    assert pct.get("Pd", 0.0) > 0 and {r.composition: r.space_group for r in rows}["Pd"] == 229
    assert abs(sum(r.percentage for r in rows) - 100.0) <= 0.01


# -- 4 ---------------------------------------------------------------------------


def test_criterion_4_log_z_converges(default_run, acceptance_note):
    state, _, _ = load_checkpoint(default_run / "checkpoint.json")
    exact = exact_marginal().log_z
    acceptance_note(4, f"log Z {state.params.log_z:.4f} vs exact {exact:.4f}")
    assert abs(state.params.log_z - exact) <= 0.1


def test_criterion_4_exhaustive_dfs_matches_factorized():
    env_cfg = EnvConfig(n_lattice_bins=2, n_offset_bins=1)
    env = SurfaceEnv(env_cfg)
    config = RunConfig(search_space=env_cfg)
    assert env.count_terminal_states() == 11_904
    pipe = RewardPipeline(config)
    dfs = enumerate_marginals(env, reward_fn=pipe.rewards)
    fac = enumerate_config(config)
    assert dfs.method == "exhaustive" and fac.method == "factorized"
    assert abs(dfs.log_z - fac.log_z) <= 1e-12
    for e in HER_ELEMENTS:
        assert abs(dfs.element_probs[e] - fac.element_probs[e]) <= 1e-12


def test_default_training_loss_falls(default_run):
    with open(default_run / "train_log.csv") as fh:
        log = list(csv.DictReader(fh))
    assert len(log) == 5000 and int(log[-1]["step"]) == 5000
    early = np.mean([float(r["loss"]) for r in log[:100]])
    assert float(log[-1]["loss"]) < early


# -- 5 ---------------------------------------------------------------------------


def test_criterion_5_gradient_matches_finite_differences(acceptance_note):
    rng = np.random.default_rng(5)
    shapes = [
        dict(),
        dict(elements=("Pt", "Rh", "Au"), n_lattice_bins=3, n_offset_bins=2),
        dict(n_lattice_bins=2, triples=((1, 0, 0), (1, 1, 1), (0, 1, 2)), faces=(False, True)),
        dict(elements=("Pd",), triples=((2, -1, 0), (1, 1, 0)), space_groups=(229,)),
    ]
    worst = 0.0
    for k in range(100):
        env = SurfaceEnv() if k % 5 == 0 else toy_env(**shapes[k % len(shapes)])
        p = random_params(env, int(rng.integers(2, 6)), rng, scale=float(rng.uniform(0.1, 0.8)))
        batch = random_batch(env, p, rng, int(rng.integers(1, 5)))
        worst = max(worst, float(finite_difference_errors(env, p, batch, h=1e-5).max()))
    acceptance_note(5, f"worst relative error {worst:.1e}")
    assert worst <= 1e-4


# -- 6 ---------------------------------------------------------------------------


def test_criterion_6_plane_basis_constraints():
    triples = all_miller_triples()
    assert len(triples) == 124
    for m in triples:
        u1, u2, w = plane_basis(m)
        g = math.gcd(math.gcd(abs(m[0]), abs(m[1])), abs(m[2]))
        assert np.dot(u1, m) == 0 and np.dot(u2, m) == 0 and np.dot(w, m) == g
        assert round(np.linalg.det(np.array([u1, u2, w], dtype=float))) == 1


@pytest.mark.parametrize("sg", [225, 229])
def test_criterion_6_layer_spacing(sg):
    a = 3.71
    bulk = build_bulk("Rh", sg, a)
    for m in all_miller_triples():
        for offset, face in [(0.0, True), (0.55, False)]:
            spacing, _ = measured_layer_spacing(cut_slab(bulk, m, offset, face))
            assert abs(spacing - a / math.sqrt(sum(c * c for c in m))) <= 1e-6
            assert abs(d_spacing(a, m) - a / math.sqrt(sum(c * c for c in m))) <= 1e-12


def test_criterion_6_fcc100_nearest_neighbour(table):
    a0, _ = table.lookup("Pt", 225)
    slab = cut_slab(relax(build_bulk("Pt", 225, a0), table), (1, 0, 0), 0.0, True)
    e = neighbor_list(slab.positions, slab.cell, 6.0)
    assert abs(e.distances.min() - a0 / math.sqrt(2)) <= 1e-6


def test_criterion_6_neighbor_list_matches_bruteforce():
    rng = np.random.default_rng(6)
    triples = all_miller_triples()
    for _ in range(100):
        sg = int(rng.choice([225, 229]))
        bulk = build_bulk(str(rng.choice(HER_ELEMENTS)), sg, float(rng.uniform(2.5, 5.5)))
        slab = cut_slab(bulk, triples[rng.integers(len(triples))], float(rng.uniform(0, 1)), bool(rng.integers(2)),
                        n_layers=int(rng.integers(1, 6)), min_thickness=float(rng.uniform(0, 10)))
        cutoff = float(rng.uniform(1.5, 7.0))
        ref = neighbor_list_bruteforce(slab.positions, slab.cell, cutoff)
        for method in ("auto", "cell", "dense"):
            got = neighbor_list(slab.positions, slab.cell, cutoff, method=method)
            for x, y in zip(got, ref):
                np.testing.assert_array_equal(x, y)


# -- 7 ---------------------------------------------------------------------------


def test_criterion_7_golden_section_vs_grid_scan(table):
    rng = np.random.default_rng(7)
    for _ in range(50):
        el, sg = str(rng.choice(HER_ELEMENTS)), int(rng.choice([225, 229]))
        start, window = float(rng.uniform(2.0, 6.0)), float(rng.uniform(0.2, 1.5))
        a0, e_coh = table.lookup(el, sg)
        n = 4 if sg == 225 else 2
        assert morse_cell_energy(start, a0, e_coh, n) == pytest.approx(lattice_energy(start, el, sg, table), abs=1e-12)
        lo, hi = relaxation_bounds(start, window)
        oracle = grid_argmin(lambda a: morse_cell_energy(a, a0, e_coh, n, table.d, table.alpha), lo, hi)
        got = relax(build_bulk(el, sg, start), table, window=window).lattice_a
        assert abs(got - oracle) <= 1e-4, (el, sg, start, window)


def test_criterion_7_idempotent_and_recovers_a0(table):
    rng = np.random.default_rng(70)
    for el in HER_ELEMENTS:
        for sg in (225, 229):
            a0, _ = table.lookup(el, sg)
            start = a0 + float(rng.uniform(-0.9, 0.9))
            r = relax(build_bulk(el, sg, start), table, window=1.0)
            assert abs(r.lattice_a - a0) <= 1e-3
            assert abs(relax(r, table, window=1.0).lattice_a - r.lattice_a) < 1e-6
            far = relax(build_bulk(el, sg, a0 + 1.7), table, window=1.0)
            assert abs(relax(far, table, window=1.0).lattice_a - far.lattice_a) < 1e-6


# -- 8 ---------------------------------------------------------------------------


def test_criterion_8_filter_rules(table):
    pt = relax(build_bulk("Pt", 225, table.lookup("Pt", 225)[0]), table)
    high = replace(pt, formation_energy=pt.formation_energy + 0.06)
    near = replace(pt, formation_energy=pt.formation_energy + 0.04)
    assert classify_samples([pt, high, near]) == [KEPT, DROPPED_ENERGY, KEPT]
    pd225 = relax(build_bulk("Pd", 225, table.lookup("Pd", 225)[0]), table)
    pd229 = relax(build_bulk("Pd", 229, table.lookup("Pd", 229)[0]), table)
    assert pd225.formation_energy > pd229.formation_energy
    assert classify_samples([pd225, pd229]) == [DROPPED_ENERGY, KEPT]
    # with the energy cut relaxed past the phase gap, the space-group rule alone removes Pd 225
    assert classify_samples([pd225, pd229], threshold=1.0) == [DROPPED_SPACEGROUP, KEPT]
    assert classify_samples([]) == []


# -- 9 ---------------------------------------------------------------------------


def test_criterion_9_ols_exact_lines_and_grid_oracle():
    rng = np.random.default_rng(9)
    for _ in range(20):
        s, b = rng.uniform(-3, 3), rng.uniform(-3, 3)
        x = rng.uniform(-10, 0, int(rng.integers(2, 20)))
        fit = fit_calibration(np.c_[x, s * x + b])
        assert abs(fit.slope - s) <= 1e-12 and abs(fit.intercept - b) <= 1e-12
    for _ in range(5):
        x = rng.uniform(-9, -2, 12)
        y = 0.1 * x + 0.9 + rng.normal(0, 0.03, 12)
        fit = fit_calibration(np.c_[x, y])
        gs, gi = grid_ols(x, y)
        assert abs(fit.slope - gs) <= 1e-6 and abs(fit.intercept - gi) <= 1e-6


def test_criterion_9_literature_predictions():
    path = os.environ.get(CALIBRATION_CSV_ENV)
    if not path:
        pytest.skip(f"set {CALIBRATION_CSV_ENV} to a (element, log10_j0, eta_exp) CSV to run this check")
    _, predictions = calibrate_from_rows(load_calibration_csv(path))
    checked = {e: v for e, v in predictions.items() if e in TABLE_ETA_INFERRED}
    assert checked, "the CSV leaves none of the inferred elements blank"
    for e, v in checked.items():
        assert abs(v - TABLE_ETA_INFERRED[e]) <= 0.02, (e, v)


# -- 10 --------------------------------------------------------------------------


def test_criterion_10_training_is_byte_identical(tmp_path):
    cfg = tmp_path / "short.json"
    cfg.write_text('{"trainer": {"n_steps": 200}}')
    outs = []
    for name in ("a", "b"):
        d = tmp_path / name
        assert cli.main(["train", "--config", str(cfg), "--seed", "7", "--out-dir", str(d)]) == 0
        outs.append([(d / f).read_bytes() for f in ("checkpoint.json", "train_log.csv")])
    assert outs[0] == outs[1]


def test_criterion_10_pipeline_outputs_are_byte_identical(default_run, tmp_path):
    ckpt = str(default_run / "checkpoint.json")
    files = ("samples.jsonl", "samples.kept.jsonl", "samples.annotated.jsonl", "report.csv", "report.svg", "report.json")
    outs = []
    for name in ("a", "b"):
        common = ["--seed", "11", "--out-dir", str(tmp_path / name)]
        assert cli.main(["sample", "-n", "1000", "--checkpoint", ckpt, *common]) == 0
        assert cli.main(["filter", *common]) == 0
        assert cli.main(["report", *common]) == 0
        outs.append([(tmp_path / name / f).read_bytes() for f in files])
    assert outs[0] == outs[1]
