import math
from itertools import product

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from conftest import random_orthogonal
from eqswarm import autodiff as ad
from eqswarm.autodiff import Tensor, grad_check
from eqswarm.cloud import TypedPointCloud
from eqswarm.crystal import (EMBEDDING_KINDS, VDW_RADII, CellError, CrystalParams,
                             CrystalSynthConfig, baseline_embeddings, build_cluster,
                             build_unit_cell, buckingham_energy, buckingham_pair,
                             crystal_embedding, energy_and_grad, energy_tensor, fit_energy_model,
                             inertia_frame, inertial_embedding, lattice_energy, lj_energy,
                             lj_pair, minimize_lj, molecular_volume, read_records, rodrigues,
                             sample_params, split_by_group, standardize_orientation,
                             structure_of, synth_crystal_dataset, write_records, RegressionConfig)
from eqswarm.data import SynthConfig, synth_molecule

HALF_PI = np.pi / 2


def cubic(a, frac=(0.5, 0.5, 0.5), rotvec=(0, 0, 0)):
    return CrystalParams([a, a, a], [HALF_PI] * 3, frac, rotvec)


def std_molecule(seed=0, **kw):
    return standardize_orientation(synth_molecule(SynthConfig(**kw), seed))[0]


def test_cubic_placement_and_volume():
    mol = std_molecule(1)
    s = build_unit_cell(mol, cubic(10.0))
    assert_allclose(s.positions.mean(axis=0), [5, 5, 5], atol=1e-12)
    assert_allclose(s.positions - 5.0, mol.positions, atol=1e-12)
    assert cubic(10.0).volume == pytest.approx(1000.0)
    assert_allclose(s.cell, 10 * np.eye(3), atol=1e-14)


def test_rodrigues_half_turn_about_z():
    assert_allclose(rodrigues([0, 0, np.pi]), np.diag([-1.0, -1.0, 1.0]), atol=1e-15)
    mol = std_molecule(2)
    s = build_unit_cell(mol, cubic(10.0, rotvec=(0, 0, np.pi)))
    assert_allclose(s.positions - 5.0, mol.positions * [-1, -1, 1], atol=1e-12)


def test_cell_matrix_convention():
    p = CrystalParams([5, 6, 7], [1.2, 1.4, 1.9], [0, 0, 0], [0, 0, 0])
    h = p.cell
    assert h[0, 1] == h[0, 2] == h[1, 2] == 0.0
    assert_allclose(np.linalg.norm(h, axis=1), [5, 6, 7])
    cos = lambda u, v: u @ v / np.linalg.norm(u) / np.linalg.norm(v)
    assert_allclose([cos(h[1], h[2]), cos(h[0], h[2]), cos(h[0], h[1])], np.cos([1.2, 1.4, 1.9]))


def test_degenerate_cell_rejected_with_volume():
    p = CrystalParams([5, 5, 5], [0.2, 0.2, 2.5], [0, 0, 0], [0, 0, 0])
    with pytest.raises(CellError, match="volume"):
        p.cell
    with pytest.raises(CellError):
        CrystalParams([5, -1, 5], [1, 1, 1], [0, 0, 0], [0, 0, 0])


def test_cluster_examples():
    mol = std_molecule(3)
    assert len(build_cluster(build_unit_cell(mol, cubic(100.0))).images) == 0
    atom = TypedPointCloud([[0, 0, 0]], [0])
    for a in (5.0, 3.0):
        s = build_cluster(build_unit_cell(atom, cubic(a)))
        brute = [n for n in product(range(-3, 4), repeat=3)
                 if n != (0, 0, 0) and np.linalg.norm(np.array(n) * a) <= 6.0]
        assert [tuple(i) for i in s.images] == sorted(brute)
        assert_array_equal(s.positions, build_unit_cell(atom, cubic(a)).positions)
    # a single atom in a 5 Å cube only reaches its 6 face neighbours within 6 Å;
    # all 26 surrounding cells need an edge below 6/sqrt(3) Å
    assert len(build_cluster(build_unit_cell(atom, cubic(5.0))).images) == 6
    assert len(build_cluster(build_unit_cell(atom, cubic(3.0))).images) >= 26


def test_thin_cell_rejected():
    atom = TypedPointCloud([[0, 0, 0]], [0])
    with pytest.raises(CellError, match="images"):
        build_cluster(build_unit_cell(atom, cubic(0.1)))


def test_lj_pair_examples():
    assert lj_pair(2.2, 2.2) == 0.0
    assert 4 * lj_pair(2.0 ** (1 / 6) * 2.2, 2.2) == pytest.approx(-1.0, abs=1e-12)


def test_lj_energy_chain():
    # hydrogen chain along c with spacing sigma: neighbours at sigma (zero) and 2 sigma
    sig = 2 * VDW_RADII[0]
    atom = TypedPointCloud([[0, 0, 0]], [0])
    p = CrystalParams([20, 20, sig], [HALF_PI] * 3, [0, 0, 0], [0, 0, 0])
    s = structure_of(atom, p)
    assert len(s.images) == 4
    assert lj_energy(s) == pytest.approx(4 * 2 * (0.5 ** 12 - 0.5 ** 6), rel=1e-14)


def test_buckingham_pair_examples():
    assert buckingham_pair(1.0) == pytest.approx(-3.26 / math.e + 0.2, rel=1e-15)
    assert abs(buckingham_pair(1e4)) < 1e-20


def test_coincident_atoms_rejected():
    atom = TypedPointCloud([[0, 0, 0]], [0])
    s = build_unit_cell(atom, cubic(10.0))
    s.images = np.array([[0, 0, 0]])
    with pytest.raises(FloatingPointError):
        lj_energy(s)


def test_lattice_energy_examples():
    mol = std_molecule(4)
    far = structure_of(mol, cubic(100.0))
    assert lattice_energy(far, lj_energy) == 0.0
    assert lj_energy(far.isolated()) == 0.0
    near = structure_of(mol, cubic(8.0))
    assert lattice_energy(near, buckingham_energy) == buckingham_energy(near)


def random_crystal(rng, max_atoms=4):
    mol = std_molecule(int(rng.integers(1 << 30)), min_atoms=2, max_atoms=max_atoms)
    while True:
        p = CrystalParams(rng.uniform(7, 12, 3), rng.uniform(1.3, 1.85, 3), rng.uniform(0, 1, 3),
                          rng.normal(size=3))
        s = structure_of(mol, p)
        if len(s.images):
            return mol, p, s


def naive_energy(s, pair):
    # every lattice index in [-3, 3]^3 except 0, every (i, j), sequential sum
    total = 0.0
    rad = VDW_RADII[s.types]
    h = s.cell
    for n in product(range(-3, 4), repeat=3):
        if n == (0, 0, 0):
            continue
        t = n[0] * h[0] + n[1] * h[1] + n[2] * h[2]
        for i in range(len(s.positions)):
            for j in range(len(s.positions)):
                q = s.positions[j] + t
                dx, dy, dz = q - s.positions[i]
                r = math.sqrt(dx * dx + dy * dy + dz * dz)
                if r <= 6.0:
                    total += pair(r, rad[i] + rad[j])
    return total


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_energies_match_naive_loop(seed):
    rng = np.random.default_rng(seed)
    _, _, s = random_crystal(rng)
    assert np.abs(s.images).max() <= 3
    assert abs(lj_energy(s) - naive_energy(s, lambda r, sg: 4 * lj_pair(r, sg))) < 1e-10
    assert abs(buckingham_energy(s) - naive_energy(s, lambda r, sg: buckingham_pair(r / sg))) < 1e-10


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_energy_invariances(seed):
    rng = np.random.default_rng(seed)
    mol, p, s = random_crystal(rng)
    R = random_orthogonal(rng)
    for fn in (lj_energy, buckingham_energy):
        e = fn(s)
        assert abs(fn(s.rotated(R)) - e) < 1e-9 * max(1.0, abs(e))
        shifted = CrystalParams(p.lengths, p.angles, p.frac + rng.integers(-2, 3, 3), p.rotvec)
        assert abs(fn(structure_of(mol, shifted)) - e) < 1e-9 * max(1.0, abs(e))


@pytest.mark.parametrize("kind", ["lj", "lj_shifted", "buckingham"])
def test_energy_gradcheck(kind):
    rng = np.random.default_rng(5)
    mol, p, s = random_crystal(rng)
    rep = grad_check(lambda x: energy_tensor(x, mol, kind), [p.to_array()])
    assert rep.n_checked > 0
    assert rep.max_rel_error < 1e-4
    e, g = energy_and_grad(p.to_array(), mol, kind)
    if kind == "lj":
        assert e == pytest.approx(lj_energy(s), rel=1e-10)
    if kind == "buckingham":
        assert e == pytest.approx(buckingham_energy(s), rel=1e-10)


def test_standardize_orientation():
    mol = synth_molecule(SynthConfig(min_atoms=6, max_atoms=8), 11)
    std, axes, degenerate = standardize_orientation(mol)
    assert not degenerate
    vals, std_axes, _ = inertia_frame(std)
    assert np.all(np.diff(vals) <= 0)
    assert_allclose(np.abs(std_axes), np.eye(3), atol=1e-9)
    assert_allclose(std_axes, np.eye(3), atol=1e-9)  # already standard: identity
    rng = np.random.default_rng(0)
    for improper in (False, True):
        R = random_orthogonal(rng, improper=improper)
        rec = standardize_orientation(mol.rotated(R))[0]
        rms = np.sqrt(np.mean(np.sum((rec.positions - std.positions) ** 2, axis=1)))
        assert rms < 1e-8


def test_linear_molecule_aligned_to_z():
    pts = np.outer([-1.5, 0.0, 1.5], [1, 2, 2]) / 3.0
    line = TypedPointCloud(pts, [1, 1, 3])
    std, _, degenerate = standardize_orientation(line)
    assert degenerate
    assert_allclose(std.positions[:, :2], 0.0, atol=1e-9)


def test_embeddings():
    mol = std_molecule(6)
    p1, p2 = cubic(9.0), cubic(11.0, frac=(0.1, 0.2, 0.3))
    m = baseline_embeddings(mol)["volume"]
    e1, e2 = crystal_embedding(m, p1), crystal_embedding(m, p2)
    assert len(e1) == len(m) + 12
    assert_array_equal(e1[:len(m)], e2[:len(m)])
    assert not np.array_equal(e1[len(m):], e2[len(m):])
    assert_array_equal(crystal_embedding(m, p1), e1)
    assert_allclose(crystal_embedding(np.zeros(0), p1), [0.45] * 3 + [0.5] * 3 + [0.5] * 3 + [0] * 3)
    h = TypedPointCloud([[0, 0, 0]], [0])
    assert molecular_volume(h) == pytest.approx(4 / 3 * np.pi * 1.1 ** 3)
    assert_array_equal(baseline_embeddings(h)["empty"], baseline_embeddings(mol)["empty"])
    assert set(EMBEDDING_KINDS) == {"empty", "volume", "inertial", "autoencoder"}


def test_inertial_embedding_rotates():
    mol = synth_molecule(SynthConfig(min_atoms=6, max_atoms=8), 12)
    R = random_orthogonal(np.random.default_rng(1), improper=False)
    a, b = inertial_embedding(mol), inertial_embedding(mol.rotated(R))
    assert_allclose(b[:3], a[:3], rtol=1e-10)
    assert_allclose(b[3:].reshape(3, 3), a[3:].reshape(3, 3) @ R.T, atol=1e-9)


def test_minimizer_descends():
    mol = std_molecule(7)
    x0 = sample_params(mol, np.random.default_rng(0), CrystalSynthConfig()).to_array()
    x, e0, e, ok = minimize_lj(mol, x0)
    assert ok and e <= e0


@pytest.fixture(scope="module")
def tiny_dataset():
    return synth_crystal_dataset(3, seed=5)


def test_dataset_shape_and_determinism(tiny_dataset, tmp_path):
    recs, mols = tiny_dataset
    for b in mols:
        rows = [r for r in recs if r.base == b]
        assert len(rows) == 11
        assert [r.variant for r in rows] == list(range(11))
    again, _ = synth_crystal_dataset(3, seed=5)
    assert all(np.array_equal(a.params, b.params) and a.buckingham == b.buckingham
               for a, b in zip(recs, again))
    path = write_records(recs, tmp_path / "c.jsonl", "deadbeef")
    assert "config_hash=deadbeef" in path.read_text()
    back = read_records(path)
    assert all(np.array_equal(a.params, b.params) and a.lj == b.lj for a, b in zip(recs, back))
    with pytest.raises(ValueError):
        synth_crystal_dataset(0)


def test_split_by_group_is_disjoint():
    groups = np.repeat(np.arange(20), 11)
    tr, te = split_by_group(groups, 0.2, 0)
    assert not set(groups[tr]) & set(groups[te])
    assert len(set(groups[te])) == 4 and len(tr) + len(te) == len(groups)


def test_fit_energy_model_learns_smooth_target():
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, (400, 3))
    y = 3 * x[:, 0] - x[:, 1] ** 2
    cfg = RegressionConfig(hidden=32, layers=2, epochs=40, batch=32, lr=3e-3, weight_decay=0.0)
    res = fit_energy_model(x, y, np.arange(400) // 4, cfg, "toy")
    assert res.r > 0.95
