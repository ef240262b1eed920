import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from conftest import random_orthogonal, small_model_config
from eqswarm.cloud import DomainError, TypedPointCloud
from eqswarm.model import Autoencoder, Embedding, ModelConfig


@pytest.fixture(scope="module", params=["graph", "emlp"])
def model(request):
    return Autoencoder(small_model_config(decoder=request.param))


def rel(a, b):
    return np.abs(a - b).max() / max(np.abs(b).max(), 1e-300)


def test_encode_equivariance_and_invariance(model, molecules):
    rng = np.random.default_rng(0)
    base = model.encode(molecules[:5])
    for R in (random_orthogonal(rng, improper=i % 2 == 1) for i in range(6)):
        rot = model.encode([m.rotated(R) for m in molecules[:5]])
        for e, er in zip(base, rot):
            assert rel(er.vectors, e.vectors @ R.T) < 1e-10
            assert rel(er.scalars, e.scalars) < 1e-10


def test_encode_permutation_invariant(model, molecules):
    rng = np.random.default_rng(1)
    m = molecules[0]
    e1 = model.encode([m])[0]
    e2 = model.encode([m.permuted(rng.permutation(m.n_atoms))])[0]
    assert_allclose(e2.vectors, e1.vectors, atol=1e-12)
    assert_allclose(e2.scalars, e1.scalars, atol=1e-12)


def test_inversion_symmetric_molecule_cancels(model):
    pair = TypedPointCloud([[1.0, 0, 0], [-1.0, 0, 0]], [1, 1])
    assert np.linalg.norm(model.encode([pair])[0].vectors) < 1e-10


def test_decode_weights_and_equivariance(model, molecules):
    rng = np.random.default_rng(2)
    emb = model.encode(molecules[:1])[0]
    sw = model.decode([emb], [5])[0]
    assert sw.size == model.cfg.dec_nodes
    assert sw.weights.sum() == pytest.approx(5.0, abs=1e-9)
    assert np.all(sw.weights >= 0)
    assert_allclose(sw.type_probs.sum(axis=1), 1.0, atol=1e-12)
    R = random_orthogonal(rng, improper=True)
    swr = model.decode([emb.rotated(R)], [5])[0]
    assert rel(swr.positions, sw.positions @ R.T) < 1e-10
    assert_allclose(swr.type_probs, sw.type_probs, atol=1e-12)
    assert_allclose(swr.weights, sw.weights, atol=1e-12)


def test_zero_embedding_is_degenerate(model):
    k = model.cfg.bottleneck
    sw = model.decode([Embedding.zeros(k)], [3])[0]
    assert_allclose(sw.positions, 0.0, atol=1e-15)
    assert_allclose(sw.weights, 3.0 / model.cfg.dec_nodes, rtol=1e-12)


def test_decode_rejects_zero_atoms(model):
    with pytest.raises(DomainError):
        model.decode([Embedding.zeros(model.cfg.bottleneck)], [0])


def test_reconstruct_end_to_end_equivariance(model, molecules):
    rng = np.random.default_rng(3)
    R = random_orthogonal(rng, improper=True)
    a = model.reconstruct(molecules[:4])
    b = model.reconstruct([m.rotated(R) for m in molecules[:4]])
    for sa, sb, m in zip(a, b, molecules[:4]):
        assert rel(sb.positions, sa.positions @ R.T) < 1e-9
        assert sa.weights.sum() == pytest.approx(m.n_atoms, abs=1e-9)


def test_reconstruct_matches_encode_decode(model, molecules):
    embs = model.encode(molecules[:3])
    dec = model.decode(embs, [m.n_atoms for m in molecules[:3]])
    for s1, s2 in zip(dec, model.reconstruct(molecules[:3])):
        assert_allclose(s1.positions, s2.positions, atol=1e-12)


def test_same_seed_same_parameters():
    a = Autoencoder(small_model_config()).state_dict()
    b = Autoencoder(small_model_config()).state_dict()
    assert a.keys() == b.keys()
    for k in a:
        assert_array_equal(a[k], b[k])


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(decoder="mlp")
    with pytest.raises(ValueError):
        ModelConfig(enc_convs=0)
