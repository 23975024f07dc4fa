
import json
import numpy as np
import pytest
import nfnplop as plop
from nfnplop.corpus import synthetic_corpus, pad_mask, load_tokens, decode


def test_arithmetic_corpus():
    tokens = synthetic_corpus('arithmetic', 4, 24, seed=1)
    assert tokens.shape == (4, 24)
    assert tokens.dtype == np.int64
    assert set(decode(tokens[0])) <= set('0123456789+=;')

    # every complete equation adds up
    for eq in decode(tokens[1]).split(';')[:-1]:
        lhs, rhs = eq.split('=')
        a, b = lhs.split('+')
        assert int(a) + int(b) == int(rhs)

def test_corpus_is_seeded():
    assert np.array_equal(synthetic_corpus('arithmetic', 3, 16, seed=2), synthetic_corpus('arithmetic', 3, 16, seed=2))
    assert not np.array_equal(synthetic_corpus('arithmetic', 3, 16, seed=2), synthetic_corpus('arithmetic', 3, 16, seed=3))

def test_shuffled_permutes_each_row():
    a = synthetic_corpus('arithmetic', 3, 16, seed=2)
    s = synthetic_corpus('shuffled', 3, 16, seed=2)
    for i in range(3):
        assert sorted(a[i]) == sorted(s[i])

    assert not np.array_equal(a, s)

def test_corpus_validation():
    with pytest.raises(plop.ConfigError):
        synthetic_corpus('poetry', 2, 8)

    with pytest.raises(plop.ConfigError):
        synthetic_corpus('arithmetic', 0, 8)

def test_pad_mask():
    mask = pad_mask([3, 0, 5], 5)
    assert mask.tolist() == [
        [True, True, True, False, False],
        [False, False, False, False, False],
        [True, True, True, True, True],
    ]

    with pytest.raises(plop.ShapeError):
        pad_mask([6], 5)

def test_load_tokens_json(tmp_path):
    path = str(tmp_path / 'tokens.json')
    with open(path, 'w') as fh:
        json.dump([[5, 6, 7], [8, 9]], fh)

    tokens, mask = load_tokens(path)
    assert tokens.tolist() == [[5, 6, 7], [8, 9, 0]]
    assert mask.tolist() == [[True, True, True], [True, True, False]]

def test_load_tokens_text(tmp_path):
    path = str(tmp_path / 'tokens.txt')
    with open(path, 'w') as fh:
        fh.write('1 2 3\n\n4 5 6\n')

    tokens, mask = load_tokens(path)
    assert tokens.tolist() == [[1, 2, 3], [4, 5, 6]]
    assert mask is None

def test_load_tokens_errors(tmp_path):
    path = str(tmp_path / 'bad.json')
    with open(path, 'w') as fh:
        fh.write('{"tokens": [1, 2]}')

    with pytest.raises(plop.ConfigError):
        load_tokens(path)

    path = str(tmp_path / 'bad.txt')
    with open(path, 'w') as fh:
        fh.write('1 2 x\n')

    with pytest.raises(plop.ConfigError):
        load_tokens(path)
