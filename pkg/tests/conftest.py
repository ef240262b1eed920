import numpy as np
import pytest

from eqswarm.data import SynthConfig, synth_dataset
from eqswarm.model import ModelConfig


def random_orthogonal(rng, improper=None):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    if improper is None:
        improper = rng.uniform() < 0.5
    return -q if improper else q


def small_model_config(**kw):
    base = dict(type_dim=8, enc_dim=16, enc_vdim=16, enc_convs=1, emlp_depth=1, msg_dim=16,
                num_rbf=8, bottleneck=8, dec_nodes=12, dec_dim=16, dec_vdim=16, dec_layers=1,
                decoder="graph", seed=0)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def molecules():
    return synth_dataset(SynthConfig(seed=7), 12)


_VERDICTS = pytest.StashKey[dict]()


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion; printed in the terminal summary."""
    table = request.config.stash.setdefault(_VERDICTS, {})

    def record(number, ok, detail):
        table[number] = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    table = config.stash.get(_VERDICTS, {})
    if table:
        terminalreporter.section("acceptance criteria")
        for number in sorted(table):
            terminalreporter.write_line(table[number])
