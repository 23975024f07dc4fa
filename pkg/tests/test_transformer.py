
import warnings
import numpy as np
import pytest
import nfnplop as plop
from nfnplop.tensor import Rng
from nfnplop.nfn import score_modules
from nfnplop.corpus import synthetic_corpus, pad_mask
from nfnplop.transformer import (TransformerConfig, build_model, forward_with_capture, loss, gradients,
                                 gradient_check, train_toy, nfn_map)


@pytest.fixture(scope='module')
def tiny():
    return build_model(TransformerConfig(n_layers=2, n_heads=2, d_model=8, d_mlp=12, vocab_size=256, max_seq_len=16, seed=1))

def test_config_validation():
    with pytest.raises(plop.ConfigError):
        TransformerConfig(d_model=10, n_heads=4)

    with pytest.raises(plop.ConfigError):
        TransformerConfig(n_layers=0)

    c = TransformerConfig(n_layers=3, seed=4)
    assert TransformerConfig.from_dict(c.to_dict()).to_dict() == c.to_dict()
    assert c.d_head == 16

def test_build_model(toy_model, toy_config):
    weights = toy_model.weights()
    assert len(weights) == 14
    assert list(weights)[:7] == ['layers.0.attn.q_proj', 'layers.0.attn.k_proj', 'layers.0.attn.v_proj',
                                 'layers.0.attn.o_proj', 'layers.0.mlp.gate_proj', 'layers.0.mlp.up_proj',
                                 'layers.0.mlp.down_proj']
    assert weights['layers.1.mlp.gate_proj'].shape == (172, 64)
    assert weights['layers.1.mlp.down_proj'].shape == (64, 172)
    assert all(w.dtype == np.float32 for w in toy_model.params.values())
    assert 'lm_head' not in weights

    assert build_model(toy_config) == toy_model
    assert build_model(TransformerConfig(seed=1)) != toy_model

def test_capture(toy_model, toy_tokens):
    logits, captured = forward_with_capture(toy_model, toy_tokens)
    assert logits.shape == (2, 8, 256)
    assert len(captured) == 14
    for name,batch in captured.items():
        assert len(batch) == 16
        assert batch.input_dim == (172 if name.endswith('down_proj') else 64)
        assert batch.layer == int(name.split('.')[1])

    # q, k and v read the same normalized input
    q = captured['layers.1.attn.q_proj'].inputs
    assert np.array_equal(q, captured['layers.1.attn.k_proj'].inputs)
    assert np.array_equal(q, captured['layers.1.attn.v_proj'].inputs)
    assert np.allclose(np.mean(q.astype(np.float64)**2, axis=1), 1.0, atol=1e-3)

def test_single_sequence_input(toy_model, toy_tokens):
    logits, captured = forward_with_capture(toy_model, toy_tokens[0])
    assert logits.shape == (1, 8, 256)
    assert len(captured['layers.0.attn.q_proj']) == 8

def test_causality(toy_model, toy_tokens):
    changed = toy_tokens.copy()
    changed[:, -1] = (changed[:, -1] + 1) % 256
    a, _ = forward_with_capture(toy_model, toy_tokens)
    b, _ = forward_with_capture(toy_model, changed)
    assert np.allclose(a[:, :-1], b[:, :-1], atol=1e-6)
    assert not np.allclose(a[:, -1], b[:, -1])

def test_pad_rows_are_zero(toy_model, toy_tokens):
    mask = pad_mask([8, 5], 8)
    _, captured = forward_with_capture(toy_model, toy_tokens, mask)
    for batch in captured.values():
        norms = np.linalg.norm(batch.inputs, axis=1)
        assert np.sum(norms == 0) == 3
        assert np.all(norms[:13] > 0)

def test_pad_rows_are_skipped_when_scoring(toy_model, toy_tokens):
    mask = pad_mask([8, 5], 8)
    _, captured = forward_with_capture(toy_model, toy_tokens, mask)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter('always')
        scores = score_modules(toy_model.weights(), captured, m=2, rng=Rng(0))

    assert len([w for w in caught if 'zero-norm' in str(w.message)]) == 14
    assert all(s.n_skipped == 3 and s.n_samples == 13 for s in scores)

    with pytest.warns(UserWarning, match='zero-norm'):
        grid = nfn_map(toy_model, toy_tokens, m=2, rng=Rng(0), mask=mask)

    assert grid.scores.shape == (2, 7)

def test_token_validation(toy_model):
    with pytest.raises(plop.ShapeError):
        forward_with_capture(toy_model, np.array([[1, 2, 256]]))

    with pytest.raises(plop.ShapeError):
        forward_with_capture(toy_model, np.array([[1, -1]]))

    with pytest.raises(plop.ShapeError):
        forward_with_capture(toy_model, np.ones((1, 65), dtype=np.int64))

    with pytest.raises(plop.ShapeError):
        forward_with_capture(toy_model, np.array([[1.0, 2.0]]))

    with pytest.raises(plop.ShapeError):
        forward_with_capture(toy_model, np.array([[1, 2, 3]]), mask=np.array([[True, True]]))

def test_loss_needs_two_tokens(toy_model):
    with pytest.raises(plop.ShapeError):
        loss(toy_model, np.array([[5, 6, 7]]), mask=np.array([[True, False, False]]))

def test_initial_loss_is_near_uniform(toy_model, toy_tokens):
    assert loss(toy_model, toy_tokens) == pytest.approx(np.log(256), rel=0.05)

def test_gradients_cover_every_parameter(tiny):
    tokens = synthetic_corpus('arithmetic', 2, 6, seed=3)
    value, grads = gradients(tiny, tokens)
    assert value == pytest.approx(loss(tiny, tokens), rel=1e-5)
    assert grads.keys() == tiny.params.keys()
    for k,g in grads.items():
        assert g.shape == tiny.params[k].shape

def test_gradient_check(tiny):
    tokens = synthetic_corpus('arithmetic', 2, 6, seed=3)
    assert gradient_check(tiny, tokens, n_entries=4, seed=0) < 1e-3

def test_gradient_check_with_padding(tiny):
    tokens = synthetic_corpus('arithmetic', 2, 6, seed=3)
    assert gradient_check(tiny, tokens, pad_mask([6, 4], 6), n_entries=4, seed=0) < 1e-3

def test_train_zero_steps(tiny):
    trained = train_toy(tiny, 'arithmetic', steps=0)
    assert trained == tiny
    assert trained is not tiny
    assert trained.history == []

def test_training_lowers_loss(tiny):
    trained = train_toy(tiny, 'arithmetic', steps=40, batch_size=8, n_sequences=32, seq_len=16, seed=0)
    h = trained.history
    assert len(h) == 40
    assert np.mean(h[-5:]) < np.mean(h[:5])
    assert all(v.dtype == np.float32 for v in trained.params.values())

    # the input model is untouched
    assert tiny == build_model(tiny.config)

def test_train_validation(tiny):
    with pytest.raises(plop.ConfigError):
        train_toy(tiny, 'arithmetic', steps=1, optimizer='sgd')

    with pytest.raises(plop.ConfigError):
        train_toy(tiny, 'poetry', steps=1)

def test_set_weight(tiny):
    W = np.eye(8, dtype=np.float32)
    other = tiny.set_weight('layers.0.attn.q_proj', W)
    assert np.array_equal(other.params['layers.0.attn.q_proj'], W)
    assert not np.array_equal(tiny.params['layers.0.attn.q_proj'], W)

    with pytest.raises(plop.ShapeError):
        tiny.set_weight('layers.0.attn.q_proj', np.eye(4))

def test_identity_queries_score_one(toy_model, toy_tokens):
    model = toy_model
    for i in range(model.config.n_layers):
        model = model.set_weight('layers.{}.attn.q_proj'.format(i), np.eye(64))

    grid = nfn_map(model, toy_tokens, m=4, rng=Rng(0))
    assert np.allclose(grid.column('q_proj'), 1.0, atol=1e-5)

def test_nfn_map_ignores_workers(toy_model, toy_tokens):
    a = nfn_map(toy_model, toy_tokens, m=2, rng=Rng(3), workers=1)
    b = nfn_map(toy_model, toy_tokens, m=2, rng=Rng(3), workers=4)
    assert a == b
    assert a.metadata['seed'] == 3
