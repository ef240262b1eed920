import csv
import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from conftest import random_orthogonal
from eqswarm.cloud import Swarm, TypedPointCloud
from eqswarm.matching import (MatchReport, agglomerative_cluster, match_dataset, mean_deviations,
                              reports_to_csv, scaffold_match)


def swarm(pos, w, types=None, nc=5):
    pos = np.asarray(pos, float).reshape(-1, 3)
    probs = np.zeros((len(pos), nc))
    probs[np.arange(len(pos)), np.zeros(len(pos), int) if types is None else types] = 1.0
    return Swarm(pos, probs, np.asarray(w, float), 1)


ORIGIN = TypedPointCloud([[0, 0, 0]], [0])


def test_symmetric_pair_matches_exactly():
    atoms, rep = scaffold_match(ORIGIN, swarm([[0.1, 0, 0], [-0.1, 0, 0]], [0.5, 0.5]))
    assert_allclose(atoms[0].position, 0.0, atol=1e-15)
    assert atoms[0].mass == 1.0
    assert rep.deviations[0] == pytest.approx(0.0, abs=1e-15)
    assert rep.molecule_matched and rep.type_accuracy == 1.0


def test_weighted_mean_deviation():
    atoms, rep = scaffold_match(ORIGIN, swarm([[0.1, 0, 0], [-0.1, 0, 0]], [0.75, 0.25]))
    assert_allclose(atoms[0].position, [0.05, 0, 0], atol=1e-15)
    assert rep.deviations[0] == pytest.approx(0.05)


def test_point_outside_radius_leaves_atom_unmatched():
    _, rep = scaffold_match(ORIGIN, swarm([[0.6, 0, 0]], [1.0]))
    assert rep.masses[0] == 0.0
    assert not rep.matched[0] and not rep.molecule_matched
    assert np.isnan(rep.mean_deviation)


def test_overlapping_spheres_go_to_nearest_then_lower_index():
    cloud = TypedPointCloud([[0, 0, 0], [0.6, 0, 0]], [0, 0])
    _, rep = scaffold_match(cloud, swarm([[0.2, 0, 0], [0.3, 0, 0]], [0.5, 0.5]))
    # 0.2 is nearer atom 0; 0.3 is equidistant and goes to atom 0
    assert_allclose(rep.masses, [1.0, 0.0])


def test_mean_deviation_examples():
    def rep(devs):
        devs = np.asarray(devs, float)
        return MatchReport(np.ones(len(devs), bool), devs, np.ones(len(devs)), np.ones(len(devs), bool))
    assert mean_deviations([rep([0, 0]), rep([0])]) == (0.0, 0.0)
    a, m = mean_deviations([rep([0, 0.2]), rep([0.1])])
    assert a == pytest.approx(0.1) and m == pytest.approx(0.1)
    a, m = mean_deviations([rep([0.1, 0.3, 0.05])])
    assert a == pytest.approx(m)
    empty = MatchReport(np.zeros(1, bool), np.full(1, np.nan), np.zeros(1), np.zeros(1, bool))
    assert mean_deviations([empty]) == (None, None)


def test_agglomerative_examples():
    rng = np.random.default_rng(0)
    clump = rng.normal(scale=0.02, size=(5, 3))
    two = agglomerative_cluster(swarm(np.concatenate([clump, clump + [3, 0, 0]]), np.full(10, 0.2)))
    assert len(two) == 2
    assert_allclose(sorted(a.mass for a in two), [1.0, 1.0])
    one = agglomerative_cluster(swarm(rng.uniform(0, 0.05, (6, 3)), np.full(6, 0.5)))
    assert len(one) == 1 and one[0].mass == pytest.approx(3.0)
    pos = np.concatenate([clump, clump + [3, 0, 0], [[1.8, 0, 0]]])
    w = np.concatenate([np.full(10, 0.2), [0.1]])
    merged = agglomerative_cluster(swarm(pos, w))
    assert len(merged) == 2
    assert_allclose(sorted(a.mass for a in merged), [1.0, 1.1])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_scaffold_and_agglomerative_agree_when_tight(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 6))
    centers = np.array([[2.0 * i, rng.normal(), rng.normal()] for i in range(n)])
    cloud = TypedPointCloud(centers, rng.integers(0, 5, n))
    pts = np.repeat(centers, 4, axis=0) + rng.uniform(-0.1, 0.1, (4 * n, 3))
    w = rng.uniform(0.2, 1.0, 4 * n)
    sw = swarm(pts, w)
    scaf, rep = scaffold_match(cloud, sw)
    agg = agglomerative_cluster(sw)
    assert rep.molecule_matched
    assert len(agg) == n
    for a in agg:
        k = int(np.argmin(np.linalg.norm(centers - a.position, axis=1)))
        assert_allclose(a.position, scaf[k].position, atol=1e-9)
        assert a.mass == pytest.approx(scaf[k].mass, abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_rotation_invariance_and_cutoff_monotone(seed):
    rng = np.random.default_rng(seed)
    cloud = TypedPointCloud(rng.normal(size=(4, 3)), rng.integers(0, 5, 4))
    sw = Swarm(cloud.positions[rng.integers(0, 4, 12)] + rng.normal(scale=0.3, size=(12, 3)),
               rng.dirichlet(np.ones(5), 12), rng.dirichlet(np.ones(12)) * 4, 4)
    _, rep = scaffold_match(cloud, sw)
    R = random_orthogonal(rng)
    _, rep_r = scaffold_match(cloud.rotated(R), sw.rotated(R))
    assert np.array_equal(rep.matched, rep_r.matched)
    assert_allclose(rep.deviations, rep_r.deviations, atol=1e-10)
    fracs = [scaffold_match(cloud, sw, mass_cutoff=c)[1].matched_fraction for c in np.linspace(0, 2, 21)]
    assert np.all(np.diff(fracs) <= 0)


def test_dataset_match_and_csv():
    clouds = [ORIGIN, TypedPointCloud([[0, 0, 0], [2, 0, 0]], [0, 1])]
    swarms = [swarm([[0.05, 0, 0]], [1.0]),
              swarm([[0.0, 0, 0], [2.1, 0, 0]], [1.0, 1.0], types=[0, 2])]
    dm = match_dataset(clouds, swarms)
    assert dm.matched_molecule_fraction == 1.0
    assert dm.atomwise == pytest.approx((0.05 + 0 + 0.1) / 3)
    assert dm.molwise == pytest.approx((0.05 + 0.05) / 2)
    rows = list(csv.DictReader(io.StringIO(reports_to_csv(dm.reports))))
    assert len(rows) == 2
    assert rows[1]["molecule_id"] == "1" and rows[1]["type_accuracy"] == "0.5"
