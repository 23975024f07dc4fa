'''A small Llama-style decoder for producing NFN maps at desk scale

Each layer is pre-normalized causal multi-head attention followed by a
SiLU-gated MLP, both with residual connections:

    a = rms(x);  x = x + o_proj(attn(q_proj(a), k_proj(a), v_proj(a)))
    b = rms(x);  x = x + down_proj(silu(gate_proj(b)) * up_proj(b))

Tokens are embedded with a learned table plus learned absolute positions and
the output goes through a final rms() and a separate lm_head. The normalization
has no learnable scale.

Linear modules are named 'layers.<i>.attn.<q|k|v|o>_proj' and
'layers.<i>.mlp.<gate|up|down>_proj'; weights are (out, in) like torch.nn.Linear.
lm_head is not a scored module.

The backward pass is written out by hand for this one architecture; it is only
used by train_toy() and gradient_check().
'''

import logging
import numpy as np
import nfnplop as p
from . import tensor
from . import corpus
from . import nfn
from . import theory

logger = logging.getLogger(__name__)

_rms_eps = 1e-6

_attn_types = ['q_proj', 'k_proj', 'v_proj', 'o_proj']
_mlp_types = ['gate_proj', 'up_proj', 'down_proj']


class TransformerConfig():
    '''Model dimensions

    Arguments:
        n_layers:       decoder layers

        n_heads:        attention heads; must divide d_model

        d_model:        residual stream width

        d_mlp:          MLP hidden width

        vocab_size:     token vocabulary

        max_seq_len:    longest sequence the position table covers

        seed:           weight seed. Pass None to use the global default
    '''

    def __init__(self, n_layers=2, n_heads=4, d_model=64, d_mlp=172, vocab_size=256, max_seq_len=64, seed=None):
        self.n_layers = int(n_layers)
        self.n_heads = int(n_heads)
        self.d_model = int(d_model)
        self.d_mlp = int(d_mlp)
        self.vocab_size = int(vocab_size)
        self.max_seq_len = int(max_seq_len)
        self.seed = p.seed if seed is None else int(seed)

        for k,v in self.to_dict().items():
            if k != 'seed' and v < 1:
                raise p.ConfigError('{} must be positive, got {}'.format(k, v))

        if self.d_model % self.n_heads:
            raise p.ConfigError('d_model={} is not divisible by n_heads={}'.format(self.d_model, self.n_heads))

    @property
    def d_head(self):
        return self.d_model // self.n_heads

    def to_dict(self):
        return {'n_layers': self.n_layers, 'n_heads': self.n_heads, 'd_model': self.d_model, 'd_mlp': self.d_mlp,
                'vocab_size': self.vocab_size, 'max_seq_len': self.max_seq_len, 'seed': self.seed}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d[k] for k in ('n_layers', 'n_heads', 'd_model', 'd_mlp', 'vocab_size', 'max_seq_len', 'seed') if k in d})

    def __repr__(self):
        return 'TransformerConfig({})'.format(', '.join('{}={}'.format(k,v) for k,v in self.to_dict().items()))


class Model():
    '''Weights of a toy transformer

    `params` maps parameter names to arrays: 'embed' (vocab, d_model), 'pos'
    (max_seq_len, d_model), 'lm_head' (vocab, d_model) and the linear modules.
    '''

    def __init__(self, config, params):
        self.config = config
        self.params = dict(params)
        self.history = []

    def __repr__(self):
        c = self.config
        return 'Model({} layers, d_model={}, {} linear modules)'.format(c.n_layers, c.d_model, len(self.linear_modules()))

    def __eq__(self, other):
        return type(other) is Model and self.params.keys() == other.params.keys() and \
            all(np.array_equal(v, other.params[k]) for k,v in self.params.items())

    def linear_modules(self):
        names = []
        for i in range(self.config.n_layers):
            names += ['layers.{}.attn.{}'.format(i, t) for t in _attn_types]
            names += ['layers.{}.mlp.{}'.format(i, t) for t in _mlp_types]

        return names

    def weights(self):
        '''Returns a dict of linear module name -> weight matrix
        '''

        return {k: self.params[k] for k in self.linear_modules()}

    def set_weight(self, name, W):
        '''Returns a copy of the model with one parameter replaced
        '''

        W = np.asarray(W, dtype=self.params[name].dtype)
        if W.shape != self.params[name].shape:
            raise p.ShapeError('replacement for {} has the wrong shape'.format(name), expected=self.params[name].shape, got=W.shape)

        params = dict(self.params)
        params[name] = W
        return Model(self.config, params)

    def astype(self, dtype):
        return Model(self.config, {k: v.astype(dtype) for k,v in self.params.items()})

    def copy(self):
        m = Model(self.config, {k: v.copy() for k,v in self.params.items()})
        m.history = list(self.history)
        return m


class CapturedActivations(dict):
    '''Module name -> ActivationBatch for every linear module, in model order
    '''

    def __repr__(self):
        return 'CapturedActivations({} modules)'.format(len(self))


def build_model(config):
    '''Random float32 weights from config.seed

    Linear weights have standard deviation 1/sqrt(fan_in), embeddings 1 and
    lm_head 1/d_model, so initial logits are small.

    Example:
        model = build_model(TransformerConfig(n_layers=2, d_model=64, seed=0))
        len(model.weights())     # 14
    '''

    c = config
    rng = tensor.Rng(c.seed).substream('model')
    shapes = {'embed': (c.vocab_size, c.d_model), 'pos': (c.max_seq_len, c.d_model)}
    for i in range(c.n_layers):
        for t in _attn_types:
            shapes['layers.{}.attn.{}'.format(i, t)] = (c.d_model, c.d_model)

        shapes['layers.{}.mlp.gate_proj'.format(i)] = (c.d_mlp, c.d_model)
        shapes['layers.{}.mlp.up_proj'.format(i)] = (c.d_mlp, c.d_model)
        shapes['layers.{}.mlp.down_proj'.format(i)] = (c.d_model, c.d_mlp)

    shapes['lm_head'] = (c.vocab_size, c.d_model)

    params = {}
    for name,shape in shapes.items():
        if name in ('embed', 'pos'):
            std = 1.0
        elif name == 'lm_head':
            std = 1.0 / c.d_model
        else:
            std = 1.0 / np.sqrt(shape[1])

        params[name] = (rng.substream(name).normal(shape) * std).astype(np.float32)

    return Model(c, params)

def forward_with_capture(model, tokens, mask=None):
    '''Run the model and record the input of every linear module

    Arguments:
        model:      a Model

        tokens:     int array (batch, seq_len) of token ids, or a single sequence

        mask:       optional bool array like tokens; False marks padding. Captured
                    inputs at padded positions are zero rows

    Returns:
        (logits, CapturedActivations): logits are (batch, seq_len, vocab); each module's
        ActivationBatch holds batch * seq_len rows in sequence-major order
    '''

    logits, captured, _ = _forward(model, tokens, mask, capture=True)
    return logits, captured

def loss(model, tokens, mask=None):
    '''Mean next-token cross-entropy over positions whose input and target are both unpadded
    '''

    logits, _, _ = _forward(model, tokens, mask)
    tokens, mask = _check_tokens(model, tokens, mask)
    return _cross_entropy(logits, tokens, mask)[0]

def gradients(model, tokens, mask=None):
    '''Loss and its gradient with respect to every parameter

    Returns:
        (loss, grads) where grads has the same keys and shapes as model.params
    '''

    logits, _, cache = _forward(model, tokens, mask, keep=True)
    tokens, mask = _check_tokens(model, tokens, mask)
    value, dlogits = _cross_entropy(logits, tokens, mask)
    return value, _backward(model, cache, dlogits)

def gradient_check(model, tokens, mask=None, n_entries=5, eps=1e-5, seed=None):
    '''Compare hand-written gradients with central differences in float64

    Arguments:
        model:      a (small) Model; it is cast to float64 for the check

        n_entries:  entries sampled per parameter

    Returns:
        the largest relative error |analytic - numeric| / max(|analytic| + |numeric|, 1e-4)
    '''

    model = model.astype(np.float64)
    _, grads = gradients(model, tokens, mask)
    rng = tensor.Rng(seed).substream('gradcheck')
    seq_len = np.shape(tokens)[-1]
    worst = 0.0
    for name,W in model.params.items():
        for j in range(n_entries):
            idx = tuple(int(rng.substream(name, j, a).integers(0, s)) for a,s in enumerate(W.shape))
            # only rows of tokens and positions that occur have nonzero gradients
            if name == 'embed':
                row = np.ravel(tokens)[int(rng.substream(name, j).integers(0, np.size(tokens)))]
                idx = (int(row),) + idx[1:]
            elif name == 'pos':
                idx = (idx[0] % seq_len,) + idx[1:]

            values = []
            for sgn in (1, -1):
                Wp = W.copy()
                Wp[idx] += sgn * eps
                values.append(loss(model.set_weight(name, Wp), tokens, mask))

            numeric = (values[0] - values[1]) / (2 * eps)
            analytic = grads[name][idx]
            err = abs(analytic - numeric) / max(abs(analytic) + abs(numeric), 1e-4)
            worst = max(worst, err)

    return worst

def train_toy(model, task, steps=500, optimizer='adam', lr=3e-3, batch_size=16, n_sequences=256, seq_len=None, seed=None):
    '''Train on next-token prediction

    Arguments:
        model:          a Model; it is not modified

        task:           a task name from corpus.tasks, or a token array to train on

        steps:          optimizer steps

        optimizer:      'adam' or 'signsgd'

        lr:             learning rate

        batch_size:     sequences per step, sampled from the corpus

        n_sequences:    corpus size when task is a name

        seq_len:        sequence length when task is a name. Pass None for min(32, max_seq_len)

        seed:           seed for the corpus and batch sampling. Pass None to use the global default

    Returns:
        a new Model; its `history` lists the loss of every step's batch

    Example:
        trained = train_toy(build_model(TransformerConfig()), 'arithmetic', steps=500)
    '''

    if optimizer not in ('adam', 'signsgd'):
        raise p.ConfigError('optimizer must be adam or signsgd, got {}'.format(optimizer))

    if seed is None:
        seed = p.seed

    if type(task) is str:
        data = corpus.synthetic_corpus(task, n_sequences, seq_len or min(32, model.config.max_seq_len), seed)
    else:
        data = np.asarray(task)

    if steps == 0:
        return model.copy()

    rng = tensor.Rng(seed).substream('train')
    state = theory.AdamState({k: v.astype(np.float64) for k,v in model.params.items()})
    history = list(model.history)
    for step in range(steps):
        rows = rng.substream(step).integers(0, len(data), min(batch_size, len(data)))
        current = Model(model.config, state.params)
        value, grads = gradients(current, data[rows])
        if not np.isfinite(value):
            raise p.TrainingError('loss diverged', step=step, loss=value)

        history.append(float(value))
        if optimizer == 'adam':
            state = theory.adam_step(state, grads, lr=lr)
        else:
            state = theory.signsgd_step(state, grads, lr=lr)

        if step % 100 == 0:
            logger.info('step %d: loss %.4f', step, value)

    trained = Model(model.config, {k: v.astype(model.params[k].dtype) for k,v in state.params.items()})
    trained.history = history
    return trained

def nfn_map(model, tokens, m=None, rng=None, mask=None, workers=None, convention=None, dataset=None):
    '''NFN scores of every linear module, arranged layers x module types

    Arguments:
        model:      a Model

        tokens:     token ids, as for forward_with_capture()

        m:          baseline draws per input. Pass None to use the global default

        rng:        the root Rng. Pass None for Rng() on the global seed

        mask:       optional pad mask

        workers:    thread pool size. Pass None to use the global default

        convention: 'squared' or 'unsquared'. Pass None to use the global default

        dataset:    optional dataset tag recorded in the map's metadata

    Returns:
        an NFNMap

    Example:
        grid = nfn_map(model, corpus.synthetic_corpus('arithmetic', 8, 32), m=4, rng=Rng(0))
    '''

    rng = rng or tensor.Rng()
    _, captured = forward_with_capture(model, tokens, mask)
    scores = nfn.score_modules(model.weights(), captured, m, rng, workers, convention)
    meta = {'seed': rng.seed, 'dataset': dataset, 'm': nfn._check_m(m), 'convention': nfn._check_convention(convention)}
    return p.nfnmap.NFNMap.from_scores(scores, meta)


def _check_tokens(model, tokens, mask):
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]

    if tokens.ndim != 2 or tokens.size == 0:
        raise p.ShapeError('tokens must be a non-empty (batch, seq_len) array', got=tokens.shape)

    if not np.issubdtype(tokens.dtype, np.integer):
        raise p.ShapeError('token ids must be integers', got=tokens.dtype)

    if tokens.shape[1] > model.config.max_seq_len:
        raise p.ShapeError('sequence too long', expected='<= {}'.format(model.config.max_seq_len), got=tokens.shape[1])

    bad = (tokens < 0) | (tokens >= model.config.vocab_size)
    if np.any(bad):
        raise p.ShapeError('token id out of range', expected='[0, {})'.format(model.config.vocab_size), got=int(tokens[bad][0]))

    if mask is None:
        mask = np.ones(tokens.shape, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.ndim == 1:
            mask = mask[None, :]

        if mask.shape != tokens.shape:
            raise p.ShapeError('pad mask does not match tokens', expected=tokens.shape, got=mask.shape)

    return tokens, mask

def _rms(x):
    r = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + _rms_eps)
    return x * r, r

def _rms_backward(x, r, dy):
    return r * dy - (r**3) * x * np.mean(x * dy, axis=-1, keepdims=True)

def _silu(g):
    s = 1.0 / (1.0 + np.exp(-g))
    return g * s, s

def _split_heads(x, H):
    B, S, D = x.shape
    return x.reshape(B, S, H, D // H).transpose(0, 2, 1, 3)

def _merge_heads(x):
    B, H, S, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, S, H * dh)

def _forward(model, tokens, mask=None, capture=False, keep=False):
    '''Returns (logits, CapturedActivations or None, cache or None)
    '''

    tokens, mask = _check_tokens(model, tokens, mask)
    c = model.config
    P = model.params
    B, S = tokens.shape
    H = c.n_heads
    dtype = P['embed'].dtype
    scale = dtype.type(1.0 / np.sqrt(c.d_head))

    # a query attends to earlier unpadded keys and always to itself
    allowed = np.tril(np.ones((S, S), dtype=bool))[None, :, :] & (mask[:, None, :] | np.eye(S, dtype=bool)[None, :, :])
    bias = np.where(allowed, dtype.type(0), dtype.type(-np.inf))[:, None, :, :]
    keep_rows = mask.reshape(B * S, 1)

    inputs = {}
    cache = {'tokens': tokens, 'mask': mask, 'layers': []}
    x = P['embed'][tokens] + P['pos'][:S][None, :, :]
    for i in range(c.n_layers):
        name = 'layers.{}.'.format(i)
        a, ra = _rms(x)
        q = a @ P[name + 'attn.q_proj'].T
        k = a @ P[name + 'attn.k_proj'].T
        v = a @ P[name + 'attn.v_proj'].T
        qh, kh, vh = _split_heads(q, H), _split_heads(k, H), _split_heads(v, H)
        scores = (qh @ kh.transpose(0, 1, 3, 2)) * scale + bias
        scores = scores - np.max(scores, axis=-1, keepdims=True)
        e = np.exp(scores)
        probs = e / np.sum(e, axis=-1, keepdims=True)
        ctx = _merge_heads(probs @ vh)
        x_mid = x + ctx @ P[name + 'attn.o_proj'].T

        b, rb = _rms(x_mid)
        g = b @ P[name + 'mlp.gate_proj'].T
        u = b @ P[name + 'mlp.up_proj'].T
        sg, sig = _silu(g)
        h = sg * u
        x_out = x_mid + h @ P[name + 'mlp.down_proj'].T

        if capture:
            for t,z in (('attn.q_proj', a), ('attn.k_proj', a), ('attn.v_proj', a), ('attn.o_proj', ctx),
                        ('mlp.gate_proj', b), ('mlp.up_proj', b), ('mlp.down_proj', h)):
                rows = z.reshape(B * S, -1)
                inputs[name + t] = np.where(keep_rows, rows, 0)

        if keep:
            cache['layers'].append({'x': x, 'a': a, 'ra': ra, 'qh': qh, 'kh': kh, 'vh': vh, 'probs': probs, 'ctx': ctx,
                                    'x_mid': x_mid, 'b': b, 'rb': rb, 'g': g, 'u': u, 'sg': sg, 'sig': sig, 'h': h})

        x = x_out

    xf, rf = _rms(x)
    logits = xf @ P['lm_head'].T
    if keep:
        cache.update({'x_final': x, 'xf': xf, 'rf': rf})

    captured = None
    if capture:
        captured = CapturedActivations()
        for name in model.linear_modules():
            t = name.rsplit('.', 1)[-1]
            captured[name] = nfn.ActivationBatch(name, inputs[name], module_type=t, layer=int(name.split('.')[1]))

    return logits, captured, cache if keep else None

def _cross_entropy(logits, tokens, mask):
    '''Returns (loss, dloss/dlogits) for predicting tokens[:, 1:] from logits[:, :-1]
    '''

    valid = mask[:, :-1] & mask[:, 1:]
    count = int(np.sum(valid))
    if count == 0:
        raise p.ShapeError('no positions to predict; sequences need at least two unpadded tokens')

    z = logits[:, :-1]
    z = z - np.max(z, axis=-1, keepdims=True)
    logp = z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))
    target = tokens[:, 1:]
    picked = np.take_along_axis(logp, target[..., None], axis=-1)[..., 0]
    value = -float(np.sum(picked[valid])) / count

    d = np.exp(logp)
    np.put_along_axis(d, target[..., None], np.take_along_axis(d, target[..., None], axis=-1) - 1, axis=-1)
    d = d * (valid[..., None] / count)
    dlogits = np.zeros_like(logits)
    dlogits[:, :-1] = d
    return value, dlogits

def _backward(model, cache, dlogits):
    c = model.config
    P = model.params
    D, V = c.d_model, c.vocab_size
    scale = 1.0 / np.sqrt(c.d_head)
    grads = {}

    xf = cache['xf']
    grads['lm_head'] = dlogits.reshape(-1, V).T @ xf.reshape(-1, D)
    dx = _rms_backward(cache['x_final'], cache['rf'], dlogits @ P['lm_head'])

    for i in reversed(range(c.n_layers)):
        name = 'layers.{}.'.format(i)
        L = cache['layers'][i]

        # MLP block
        grads[name + 'mlp.down_proj'] = dx.reshape(-1, D).T @ L['h'].reshape(-1, c.d_mlp)
        dh = dx @ P[name + 'mlp.down_proj']
        du = dh * L['sg']
        dg = dh * L['u'] * L['sig'] * (1 + L['g'] * (1 - L['sig']))
        b = L['b'].reshape(-1, D)
        grads[name + 'mlp.gate_proj'] = dg.reshape(-1, c.d_mlp).T @ b
        grads[name + 'mlp.up_proj'] = du.reshape(-1, c.d_mlp).T @ b
        db = dg @ P[name + 'mlp.gate_proj'] + du @ P[name + 'mlp.up_proj']
        dx = dx + _rms_backward(L['x_mid'], L['rb'], db)

        # attention block
        grads[name + 'attn.o_proj'] = dx.reshape(-1, D).T @ L['ctx'].reshape(-1, D)
        dctx = _split_heads(dx @ P[name + 'attn.o_proj'], c.n_heads)
        probs = L['probs']
        dprobs = dctx @ L['vh'].transpose(0, 1, 3, 2)
        dvh = probs.transpose(0, 1, 3, 2) @ dctx
        dscores = probs * (dprobs - np.sum(dprobs * probs, axis=-1, keepdims=True)) * scale
        dqh = dscores @ L['kh']
        dkh = dscores.transpose(0, 1, 3, 2) @ L['qh']
        dq, dk, dv = _merge_heads(dqh), _merge_heads(dkh), _merge_heads(dvh)
        a = L['a'].reshape(-1, D)
        grads[name + 'attn.q_proj'] = dq.reshape(-1, D).T @ a
        grads[name + 'attn.k_proj'] = dk.reshape(-1, D).T @ a
        grads[name + 'attn.v_proj'] = dv.reshape(-1, D).T @ a
        da = dq @ P[name + 'attn.q_proj'] + dk @ P[name + 'attn.k_proj'] + dv @ P[name + 'attn.v_proj']
        dx = dx + _rms_backward(L['x'], L['ra'], da)

    tokens = cache['tokens']
    S = tokens.shape[1]
    dE = np.zeros_like(P['embed'])
    np.add.at(dE, tokens.ravel(), dx.reshape(-1, D))
    grads['embed'] = dE
    dpos = np.zeros_like(P['pos'])
    dpos[:S] = np.sum(dx, axis=0)
    grads['pos'] = dpos
    return grads
