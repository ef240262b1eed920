import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from eqswarm.cloud import DomainError, TypedPointCloud
from eqswarm.data import (SynthConfig, XYZFormatError, augment, load_dataset, parse_xyz,
                          strip_hydrogens, symmetry_noise, synth_dataset, synth_molecule,
                          write_dataset, write_xyz)


def pair_distances(c):
    d = np.linalg.norm(c.positions[:, None] - c.positions[None], axis=2)
    return d[np.triu_indices(c.n_atoms, 1)]


def test_single_atom_at_origin():
    m = synth_molecule(SynthConfig(min_atoms=1, max_atoms=1), 3)
    assert_array_equal(m.positions, [[0.0, 0.0, 0.0]])


def test_min_separation_over_1000_molecules():
    cfg = SynthConfig()
    for i in range(1000):
        m = synth_molecule(cfg, [0, i])
        assert cfg.min_atoms <= m.n_atoms <= cfg.max_atoms
        assert m.n_atoms == 1 or pair_distances(m).min() >= 0.8
        assert np.abs(m.centroid).max() < 1e-9


def test_tree_bond_lengths():
    # every atom beyond the first has a neighbour at a bond-length distance
    for m in synth_dataset(SynthConfig(seed=3), 50):
        d = np.linalg.norm(m.positions[:, None] - m.positions[None], axis=2)
        np.fill_diagonal(d, np.inf)
        assert np.all(d.min(axis=1) <= 1.6 + 1e-12)


def test_seed_determinism():
    a = synth_dataset(SynthConfig(seed=5), 20)
    b = synth_dataset(SynthConfig(seed=5), 20)
    for x, y in zip(a, b):
        assert_array_equal(x.positions, y.positions)
        assert_array_equal(x.types, y.types)
    c = synth_dataset(SynthConfig(seed=6), 1)[0]
    assert not (c.n_atoms == a[0].n_atoms and np.array_equal(c.positions, a[0].positions))


def test_exhausted_budget_raises():
    cfg = SynthConfig(min_atoms=30, max_atoms=30, bond_min=1.0, bond_max=1.0,
                      min_separation=1.5, max_attempts=5, max_reseeds=2)
    with pytest.raises(RuntimeError):
        synth_molecule(cfg, 0)


def test_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(min_atoms=0)
    with pytest.raises(ValueError):
        SynthConfig(bond_min=0.0)
    with pytest.raises(ValueError):
        SynthConfig(noise=-1.0)
    with pytest.raises(ValueError):
        SynthConfig(type_probs=(0.5, 0.6))


def test_augment_examples(molecules):
    m = molecules[0]
    ident = augment(m, SynthConfig(noise=0.0, rescale_min=1.0, rescale_max=1.0), 1)
    assert_allclose(ident.positions, m.positions, atol=1e-12)
    double = augment(m, SynthConfig(noise=0.0, rescale_min=2.0, rescale_max=2.0), 1)
    assert_allclose(pair_distances(double), 2 * pair_distances(m), rtol=1e-12)
    noisy = augment(m, SynthConfig(noise=0.1), 2)
    assert np.abs(noisy.centroid).max() < 1e-9
    assert not np.allclose(noisy.positions, m.positions)


def test_symmetry_noise_calibration():
    cloud = TypedPointCloud(np.zeros((10_000, 3)), np.zeros(10_000, int))
    assert symmetry_noise(cloud, 0.0) is cloud
    moved = symmetry_noise(cloud, 0.01, seed=4)
    mean = np.linalg.norm(moved.positions, axis=1).mean()
    assert abs(mean - 0.01) < 0.2 * 0.01
    with pytest.raises(ValueError):
        symmetry_noise(cloud, -0.1)


def test_xyz_examples():
    c = parse_xyz("1\n\nH 0.0 0.0 0.0")
    assert c.n_atoms == 1 and c.types[0] == 0
    assert_array_equal(c.positions, [[0, 0, 0]])
    with pytest.raises(XYZFormatError, match="line 3.*Xx"):
        parse_xyz("1\n\nXx 0 0 0")
    with pytest.raises(XYZFormatError, match="line 1"):
        parse_xyz("one\n\nH 0 0 0")
    with pytest.raises(XYZFormatError, match="line 3"):
        parse_xyz("1\n\nH 0 zero 0")
    with pytest.raises(XYZFormatError):
        parse_xyz("3\n\nH 0 0 0")


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_xyz_round_trip(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 12))
    c = TypedPointCloud(rng.normal(scale=5, size=(n, 3)), rng.integers(0, 5, n))
    back = parse_xyz(write_xyz(c, "comment"))
    assert_allclose(back.positions, c.positions, atol=1e-6)
    assert_array_equal(back.types, c.types)


def test_strip_hydrogens():
    water = TypedPointCloud([[0, 0, 0.1], [0.8, 0, -0.5], [-0.8, 0, -0.5]], [3, 0, 0])
    o = strip_hydrogens(water)
    assert o.n_atoms == 1 and o.types[0] == 3
    assert_array_equal(o.positions, [[0, 0, 0]])
    heavy = TypedPointCloud([[0, 0, 0], [1.4, 0, 0]], [1, 2])
    s = strip_hydrogens(heavy)
    assert_allclose(s.positions, heavy.positions - heavy.centroid)
    with pytest.raises(DomainError):
        strip_hydrogens(TypedPointCloud([[0, 0, 0], [0.7, 0, 0]], [0, 0]))


def test_dataset_directory_round_trip(tmp_path, molecules):
    cfg = SynthConfig(seed=7)
    manifest = write_dataset(molecules[:4], tmp_path, cfg, "abc123")
    meta = json.loads(manifest.read_text())
    assert meta["config_hash"] == "abc123"
    assert [e["seed"] for e in meta["molecules"]] == [[7, i] for i in range(4)]
    back = load_dataset(tmp_path)
    for a, b in zip(back, molecules[:4]):
        assert_allclose(a.positions, b.positions, atol=1e-6)
    assert load_dataset(tmp_path / "mol_000000.xyz")[0].n_atoms == molecules[0].n_atoms
