
import pytest
import nfnplop as plop
from nfnplop.tensor import Rng


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False, help='also run the full-size lab tests')

def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: full-size lab runs, skipped unless --runslow is given')

def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return

    skip = pytest.mark.skip(reason='needs --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip)


@pytest.fixture(autouse=True)
def restore_defaults():
    saved = plop.defaults()
    yield
    plop.configure(**saved)

@pytest.fixture
def rng():
    return Rng(1234)

@pytest.fixture
def reference_table():
    # per-type means printed for Llama-3.2-1B-Instruct on math data
    return plop.placement.TypeScoreTable.from_scores({
        'q_proj': 2.58, 'k_proj': 2.63, 'v_proj': 0.97, 'o_proj': 0.90,
        'gate_proj': 1.40, 'down_proj': 1.05, 'up_proj': 1.11,
    })

@pytest.fixture(scope='session')
def toy_config():
    return plop.transformer.TransformerConfig(n_layers=2, n_heads=4, d_model=64, d_mlp=172, vocab_size=256, max_seq_len=64, seed=0)

@pytest.fixture(scope='session')
def toy_model(toy_config):
    return plop.transformer.build_model(toy_config)

@pytest.fixture(scope='session')
def toy_tokens():
    return plop.corpus.synthetic_corpus('arithmetic', 2, 8, seed=0)
