import numpy as np
import pytest

from gridembed.cli import desk_data_config, desk_train_config
from gridembed.dataset import generate_dataset
from gridembed.embedding import EmbeddingConfig
from gridembed.grid import load_bundled


@pytest.fixture(scope="session")
def case2():
    return load_bundled("case2")


@pytest.fixture(scope="session")
def case14():
    return load_bundled("case14")


@pytest.fixture(scope="session")
def case30():
    return load_bundled("case30")


@pytest.fixture(scope="session")
def desk_corpus(case14):
    """The 200-factor 14-bus corpus with embeddings (about half a minute)."""
    net, loads = case14
    return generate_dataset(net, loads, desk_data_config(), EmbeddingConfig())


@pytest.fixture(scope="session")
def desk_train():
    return desk_train_config()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def synthetic_dataset(n=60, n_bus=14, n_gen=5, seed=0, embed=None, dispatch=None, gen_vm=None,
                      support=(1, 2, 3, 4, 5, 8)):
    """A physics-free corpus for shape and learnability tests.

    Loads are random on ``support``; ``embed``, ``dispatch`` and ``gen_vm``
    map a LoadVector to the embedded loads, the ``(pg, qg)`` pair and the
    generator voltages respectively.
    """
    from gridembed.dataset import Dataset, DatasetConfig, Instance, assign_split
    from gridembed.grid import LoadVector

    rng = np.random.default_rng(seed)
    dispatch = dispatch or (lambda s: (np.full(n_gen, s.p.sum() / n_gen), np.full(n_gen, s.q.sum() / n_gen)))
    gen_vm = gen_vm or (lambda s: np.full(n_gen, 1.05))
    insts = []
    for k in range(n):
        p = np.zeros(n_bus)
        q = np.zeros(n_bus)
        idx = list(support)
        p[idx] = rng.uniform(0.1, 0.5, len(idx))
        q[idx] = rng.uniform(-0.05, 0.2, len(idx))
        s = LoadVector(p, q)
        pg, qg = dispatch(s)
        vm = np.full(n_bus, 1.0)
        inst = Instance(k, 1.0, s, pg, qg, vm, np.zeros(n_bus), gen_vm(s), 1.0)
        if embed is not None:
            inst.embedded_loads = embed(s)
            inst.embedding_converged = True
        insts.append(inst)
    assign_split(insts, 0.8, seed)
    return Dataset("synthetic", "0" * 64, DatasetConfig(), insts)


@pytest.fixture
def synthetic():
    return synthetic_dataset


# criterion number -> "PASS/FAIL line", filled in by test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])
