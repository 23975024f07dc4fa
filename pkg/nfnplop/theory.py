'''Feature-norm growth in deep linear networks

The lab trains f(x) = W_L ... W_0 x and tracks how the feature norm of a
trained layer grows. The single-layer runs train only W = W_l0 with SignSGD on
one datapoint (x, y_hat), so the layer input z_in = W_(l0-1) ... W_0 x and the
output direction V = (W_L ... W_(l0+1))^T stay fixed. Each step is the
rank-one update

    W <- W - (eta/n) chi_t S(V) S(z_in)^T,     chi_t = sign(V^T W z_in - y_hat)

which moves the feature W z_in by -beta chi_t S(V) with beta = eta |z_in|_1 / n.
While chi_t keeps its sign, gamma_t = |W_t z_in|^2 / n grows quadratically in t
and the feature of a random input of the same norm barely moves.

Everything here runs in float64.
'''

import logging
import json
import csv
import numpy as np
from tabulate import tabulate
import nfnplop as p
from . import tensor

logger = logging.getLogger(__name__)

_trajectory_columns = ['step', 'gamma', 'gamma_baseline', 'Gamma_recursion', 'Gamma_statement', 'chi', 'alpha', 'loss']

_init_schemes = ['uniform', 'gaussian']


class LinearNetConfig():
    '''Settings for a deep linear network and its single-layer training run

    Arguments:
        n:          width of the hidden layers

        d:          input dimension

        depth:      index L of the output layer; the network has weights W_0..W_L

        layer:      index l0 of the trainable layer, 1 <= l0 <= L-1

        eta:        learning-rate constant, applied as eta/n. Pass None to use the global default

        steps:      number of training steps T

        init:       'uniform' draws the output layer uniformly on [-1/n, 1/n];
                    'gaussian' draws it with standard deviation 1/n

        seed:       random seed. Pass None to use the global default
    '''

    def __init__(self, n=1024, d=64, depth=2, layer=1, eta=None, steps=64, init='uniform', seed=None):
        self.n = int(n)
        self.d = int(d)
        self.depth = int(depth)
        self.layer = int(layer)
        self.eta = float(p.eta if eta is None else eta)
        self.steps = int(steps)
        self.init = init
        self.seed = p.seed if seed is None else int(seed)

        if self.n < 1 or self.d < 1:
            raise p.ConfigError('dimensions must be positive, got n={} d={}'.format(self.n, self.d))

        if self.depth < 2 or not 1 <= self.layer <= self.depth - 1:
            raise p.ConfigError('trainable layer must be in [1, {}], got {}'.format(self.depth - 1, self.layer))

        if self.eta <= 0:
            raise p.ConfigError('eta must be positive, got {}'.format(self.eta))

        if self.steps < 0:
            raise p.ConfigError('steps must be nonnegative, got {}'.format(self.steps))

        if self.init not in _init_schemes:
            raise p.ConfigError('init must be one of {}, got {}'.format(', '.join(_init_schemes), self.init))

    @property
    def lr(self):
        return self.eta / self.n

    def replace(self, **kwargs):
        d = self.to_dict()
        d.update(kwargs)
        return LinearNetConfig(**d)

    def to_dict(self):
        return {'n': self.n, 'd': self.d, 'depth': self.depth, 'layer': self.layer, 'eta': self.eta,
                'steps': self.steps, 'init': self.init, 'seed': self.seed}

    def __repr__(self):
        return 'LinearNetConfig({})'.format(', '.join('{}={}'.format(k,v) for k,v in self.to_dict().items()))


class TrainState():
    '''Weights W_0..W_L of a linear network plus the step counter

    W_0 is (n, d), hidden layers are (n, n) and the output layer W_L is (1, n).
    `chi` is the loss-derivative sign used by the most recent SignSGD step.
    '''

    def __init__(self, config, weights, step=0, opt=None, chi=None):
        self.config = config
        self.weights = list(weights)
        self.step = step
        self.opt = opt
        self.chi = chi

    def __repr__(self):
        return 'TrainState(step={}, shapes={})'.format(self.step, [w.shape for w in self.weights])

    @property
    def trainable(self):
        return self.weights[self.config.layer]

    def below(self):
        '''The matrix M = W_(l0-1) ... W_0 mapping network inputs to the trainable layer's inputs
        '''

        M = self.weights[0]
        for W in self.weights[1:self.config.layer]:
            M = W @ M

        return M

    def above(self):
        '''The output direction V = (W_L ... W_(l0+1))^T as a vector
        '''

        P = self.weights[-1]
        for W in reversed(self.weights[self.config.layer+1:-1]):
            P = P @ W

        return P.ravel()


class Trajectory():
    '''Per-step series from a training run

    Columns (any subset may be present): step, gamma, gamma_baseline,
    Gamma_recursion, Gamma_statement, chi, alpha, loss. `meta` holds run-level values
    such as beta, y_hat and warnings.

    Example:
        traj, dev = run_theorem1(LinearNetConfig(n=1024, steps=50))
        traj['gamma'][-1]
        traj.to_csv('theorem1.csv')
    '''

    def __init__(self, columns, meta=None):
        lengths = set(len(v) for v in columns.values())
        if len(lengths) > 1:
            raise p.ShapeError('trajectory columns differ in length', got=sorted(lengths))

        self.columns = {k: np.asarray(columns[k]) for k in _trajectory_columns if k in columns}
        self.meta = dict(meta or {})

    def __len__(self):
        return len(self.columns['step'])

    def __getitem__(self, key):
        return self.columns[key]

    def __contains__(self, key):
        return key in self.columns

    def __repr__(self):
        return 'Trajectory({} steps, {})'.format(len(self), ', '.join(self.columns))

    def to_csv(self, path):
        keys = list(self.columns)
        with open(path, 'w', newline='') as fh:
            writer = csv.writer(fh, lineterminator='\n')
            writer.writerow(keys)
            for i in range(len(self)):
                writer.writerow([_csv_value(self.columns[k][i]) for k in keys])


class LabSummary(dict):
    '''Run summary: config echo, measured values and pass/fail flags

    Flags are stored under 'checks' as {name: {'value':, 'threshold':, 'passed':}}
    '''

    def check(self, name, value, threshold, passed):
        self.setdefault('checks', {})[name] = {'value': _json_value(value), 'threshold': threshold, 'passed': bool(passed)}
        return bool(passed)

    @property
    def passed(self):
        return all(c['passed'] for c in self.get('checks', {}).values())

    def to_json(self):
        return json.dumps({k: _json_value(v) for k,v in self.items()}, indent=2, sort_keys=True) + '\n'

    def save(self, path):
        with open(path, 'w') as fh:
            fh.write(self.to_json())

    def _tables(self):
        rows = [[k, v] for k,v in self.items() if k != 'checks']
        checks = [[k, c['value'], c['threshold'], 'pass' if c['passed'] else 'FAIL'] for k,c in self.get('checks', {}).items()]
        return (rows, ['key', 'value']), (checks, ['check', 'value', 'threshold', 'result'])

    def __repr__(self):
        return '\n\n'.join(tabulate(rows, tablefmt='simple', headers=headers, floatfmt='.6g') for rows,headers in self._tables() if rows)

    def _repr_html_(self):
        return ''.join(p.htmlTable(rows, headers=headers, floatfmt='.6g') for rows,headers in self._tables() if rows)


class AdamState():
    '''Parameters and Adam moment buffers

    Arguments:
        params:     a dict of name -> float array

        m, v:       first and second moment buffers, same keys and shapes. Pass None for zeros

        t:          number of steps taken
    '''

    def __init__(self, params, m=None, v=None, t=0):
        self.params = dict(params)
        self.m = dict(m) if m is not None else {k: np.zeros_like(w, dtype=np.float64) for k,w in self.params.items()}
        self.v = dict(v) if v is not None else {k: np.zeros_like(w, dtype=np.float64) for k,w in self.params.items()}
        self.t = t

        for k,w in self.params.items():
            if k not in self.m or k not in self.v or self.m[k].shape != np.shape(w) or self.v[k].shape != np.shape(w):
                raise p.ShapeError('moment buffers do not match parameter {}'.format(k), expected=np.shape(w))

    def __repr__(self):
        return 'AdamState(t={}, params={})'.format(self.t, list(self.params))


def init_network(config, rng=None):
    '''Random weights for a linear network

    Arguments:
        config:     a LinearNetConfig

        rng:        an Rng. Pass None for Rng(config.seed)

    Returns:
        a TrainState. W_0 has standard deviation d^-1/2, hidden layers n^-1/2, and the
        output layer is uniform on [-1/n, 1/n] (or Gaussian with standard deviation 1/n
        for init='gaussian')
    '''

    rng = (rng or tensor.Rng(config.seed)).substream('init')
    n, d = config.n, config.d
    weights = [rng.substream(0).normal((n, d)) / np.sqrt(d)]
    for i in range(1, config.depth):
        weights.append(rng.substream(i).normal((n, n)) / np.sqrt(n))

    out = rng.substream(config.depth)
    if config.init == 'uniform':
        weights.append(out.uniform(-1.0 / n, 1.0 / n, (1, n)))
    else:
        weights.append(out.normal((1, n)) / n)

    return TrainState(config, weights)

def make_datapoint(config, rng=None):
    '''Returns (x, y_hat): a standard normal input and a target uniform on [0.5, 1.5]
    with a random sign
    '''

    rng = (rng or tensor.Rng(config.seed)).substream('data')
    x = rng.normal(config.d)
    y_hat = rng.uniform(0.5, 1.5) * (1.0 if rng.integers(0, 2) else -1.0)
    return x, float(y_hat)

def signsgd_single_layer_step(state, z_in, y_hat, lr=None):
    '''One SignSGD step on the trainable layer for the loss (f(x) - y_hat)^2 / 2

    Arguments:
        state:      a TrainState

        z_in:       the trainable layer's input, computed once from the frozen layers below

        y_hat:      the target

        lr:         learning rate. Pass None for eta/n

    Returns:
        a new TrainState. Only the trainable layer is replaced; the other weight arrays are
        the same objects as in `state`. The new state's `chi` is the sign used for the step
    '''

    if lr is None:
        lr = state.config.lr

    W = state.trainable
    V = state.above()
    z = np.asarray(z_in, dtype=np.float64)
    chi = tensor.sign(float(V @ (W @ z)) - y_hat)
    W_new = W - (lr * chi) * np.outer(tensor.signs(V), tensor.signs(z))

    weights = list(state.weights)
    weights[state.config.layer] = W_new
    return TrainState(state.config, weights, state.step + 1, state.opt, chi)

def gamma_prediction(t, gamma0, beta, form=None):
    '''Predicted feature norm after t constant-sign SignSGD steps

    Arguments:
        t:          step, t >= 0

        gamma0:     feature norm at t=0

        beta:       per-step feature displacement, eta |z_in|_1 / n

        form:       'recursion' gives gamma0 + beta^2 t^2 (the unrolled per-step
                    increment beta^2 (1 + 2t)); 'statement' gives gamma0 + beta^2 (1 + t(t-1)).
                    Pass None to use the global default

    Example:
        gamma_prediction(2, 1.0, 0.5, 'recursion')    # 2.0
        gamma_prediction(2, 1.0, 0.5, 'statement')    # 1.75
    '''

    if form is None:
        form = p.gamma_form

    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0):
        raise p.ConfigError('t must be nonnegative')

    if form == 'recursion':
        g = gamma0 + beta**2 * t**2
    elif form == 'statement':
        g = gamma0 + beta**2 * (1 + t * (t - 1))
        # both forms start from gamma0
        g = np.where(t == 0, gamma0, g)
    else:
        raise p.ConfigError('form must be recursion or statement, got {}'.format(form))

    return float(g) if g.ndim == 0 else g

def constancy_bound(eta, y_hat, z_bar, n, delta=None):
    '''Step count up to which the loss-derivative sign is guaranteed constant:
    (|y_hat| / z_bar - n^-delta) / eta

    Arguments:
        eta:        learning-rate constant

        y_hat:      the target

        z_bar:      output change per step divided by eta, |z_in|_1 |V|_1 / n

        n:          width

        delta:      deviation exponent. Pass None to use the global default
    '''

    if delta is None:
        delta = p.delta

    if z_bar <= 0:
        raise p.NumericError('z_bar must be positive, got {}'.format(z_bar))

    return (abs(y_hat) / z_bar - n ** -delta) / eta

def estimate_window(config, n_trials=100, level=0.95, max_steps=None):
    '''Largest step count over which at least `level` of seeded trials keep a
    constant loss-derivative sign

    Arguments:
        config:     a LinearNetConfig (steps is ignored)

        n_trials:   number of trials; trial i is seeded from (config.seed, 'trial', i)

        level:      fraction of trials that must stay constant

        max_steps:  rollout cap for trials that never flip. Pass None for 20/eta

    Returns:
        an int window W such that chi_t == chi_0 for all t <= W in at least `level` of trials
    '''

    taus = np.sort(_first_flips(config, n_trials, max_steps))
    window = int(taus[int(np.floor((1 - level) * n_trials))]) - 1
    logger.info('constant-sign window at n=%d eta=%g: %d steps (%d trials)', config.n, config.eta, window, n_trials)
    return max(window, 0)

def run_sign_constancy(config, n_trials=100, delta=None, report=False):
    '''Fraction of seeded trials whose loss-derivative sign stays constant over all
    config.steps training steps

    Arguments:
        config:     a LinearNetConfig

        n_trials:   number of trials

        delta:      deviation exponent for the step bound. Pass None to use the global default

        report:     return a LabSummary instead of the fraction

    Returns:
        the fraction of trials with chi_t == chi_0 for every step t < config.steps, or a
        LabSummary that also gives the fraction of trials whose constant phase lasted at
        least as long as constancy_bound() promises

    Notes:
        The sign is rolled out in feature space: f_(t+1) = f_t - eta z_bar chi_t, which
        equals the matrix update exactly and costs O(n) per trial.
    '''

    if delta is None:
        delta = p.delta

    constant = 0
    bound_held = 0
    within_bound = 0
    for i in range(n_trials):
        f0, y_hat, z_bar = _rollout_terms(config, i)
        tau = _first_flip(f0, y_hat, config.eta * z_bar, max(config.steps, 1))
        bound = constancy_bound(config.eta, y_hat, z_bar, config.n, delta)
        constant += tau >= config.steps
        within_bound += config.steps <= bound
        # the rollout is capped at config.steps, so only bounds below that can be checked
        bound_held += tau >= min(np.floor(bound), config.steps)

    fraction = constant / n_trials
    logger.info('sign constancy n=%d eta=%g T=%d: %.3f', config.n, config.eta, config.steps, fraction)
    if not report:
        return fraction

    s = LabSummary(experiment='signconst', config=config.to_dict(), trials=n_trials, delta=delta)
    s['constancy_fraction'] = fraction
    s['bound_held_fraction'] = bound_held / n_trials
    s['steps_within_bound_fraction'] = within_bound / n_trials
    return s

def run_theorem1(config, delta=None, gamma_form=None, z_baseline=None, method='feature'):
    '''Single-layer SignSGD on one datapoint, compared with the predicted quadratic growth

    Arguments:
        config:     a LinearNetConfig

        delta:      deviation exponent. Pass None to use the global default

        gamma_form: Gamma form the deviation is measured against. Pass None to use the global default

        z_baseline: baseline input. Pass None for a Gaussian vector rescaled to |z_in|,
                    or 'input' to use z_in itself

        method:     'feature' draws only the vectors the run depends on and rolls the
                    rank-one update out in feature space, O(n) per step. 'matrix' builds
                    the full network with init_network() and applies
                    signsgd_single_layer_step() to the n x n weight, O(n^2) per step;
                    its trajectory's meta also holds the final TrainState

    Returns:
        (Trajectory, sup_deviation) where sup_deviation = max over 1 <= t <= T of
        |gamma_t - Gamma_t|. The trajectory's meta holds both forms' deviations, beta,
        y_hat, the step bound and any warnings

    Notes:
        The two methods draw different (identically distributed) networks from the same seed.
        A warning is issued (and recorded in meta['warnings']) when config.steps exceeds
        the constant-sign step bound or when the sign actually flips during the run.
    '''

    if delta is None:
        delta = p.delta

    if gamma_form is None:
        gamma_form = p.gamma_form

    rng = tensor.Rng(config.seed)
    if method == 'matrix':
        state = init_network(config, rng)
        x, y_hat = make_datapoint(config, rng)
        z = state.below() @ x
        V = state.above()
        z_tilde = _baseline_input(z, z_baseline, rng)
        traj = _simulate(state, z, y_hat, z_tilde)
    elif method == 'feature':
        z, V, u, y_hat = _feature_terms(config, rng)
        z_tilde = _baseline_input(z, z_baseline, rng)
        traj = _rollout(config, z, V, u, _joint_output(z, z_tilde, u, rng), z_tilde, y_hat)
    else:
        raise p.ConfigError('method must be feature or matrix, got {}'.format(method))

    traj.meta['delta'] = delta
    traj.meta['gamma_form'] = gamma_form
    traj.meta['method'] = method

    z_bar = tensor.norm_l1(z) * tensor.norm_l1(V) / config.n
    bound = constancy_bound(config.eta, y_hat, z_bar, config.n, delta)
    traj.meta['step_bound'] = bound
    warnings = []
    if config.steps > bound:
        warnings.append('steps={} exceed the constant-sign bound {:.1f}'.format(config.steps, bound))

    if np.any(traj['chi'][:-1] != traj['chi'][0]):
        warnings.append('loss-derivative sign flipped at step {}'.format(int(np.argmax(traj['chi'] != traj['chi'][0]))))

    for w in warnings:
        p.warn(w)

    traj.meta['warnings'] = warnings
    for form in ('recursion', 'statement'):
        dev = np.abs(traj['gamma'][1:] - traj['Gamma_' + form][1:])
        traj.meta['sup_deviation_' + form] = float(np.max(dev)) if len(dev) else 0.0

    sup = traj.meta['sup_deviation_' + gamma_form]
    traj.meta['C_hat'] = sup * config.n ** delta
    logger.info('theorem1 n=%d T=%d: sup deviation %.3g (%s)', config.n, config.steps, sup, gamma_form)
    return traj, sup

def run_baseline_flatness(config, baseline='random', method='feature'):
    '''Feature norm of a fixed random input under the same training as run_theorem1

    Arguments:
        config:     a LinearNetConfig

        baseline:   'random' for a Gaussian input rescaled to |z_in|, or 'input' to
                    use z_in itself (the two trajectories then coincide)

        method:     'feature' or 'matrix', see run_theorem1()

    Returns:
        a Trajectory; meta['max_drift'] = max_t |gamma~_t - gamma~_0| and
        meta['growth'] = gamma_T - gamma_0
    '''

    if baseline not in ('random', 'input'):
        raise p.ConfigError('baseline must be random or input, got {}'.format(baseline))

    traj, _ = run_theorem1(config, z_baseline=None if baseline == 'random' else 'input', method=method)
    gb = traj['gamma_baseline']
    traj.meta['max_drift'] = float(np.max(np.abs(gb - gb[0])))
    traj.meta['growth'] = float(traj['gamma'][-1] - traj['gamma'][0])
    return traj

def quadratic_fit(t, y):
    '''Least-squares quadratic fit

    Returns:
        (coefficients, r2) with coefficients highest power first, as numpy.polyfit
    '''

    t = np.asarray(t, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(t) < 3:
        raise p.ShapeError('a quadratic fit needs at least 3 points', got=len(t))

    coef = np.polyfit(t, y, 2)
    resid = y - np.polyval(coef, t)
    ss_tot = np.sum((y - np.mean(y))**2)
    r2 = 1.0 - np.sum(resid**2) / ss_tot if ss_tot > 0 else 1.0
    return coef, float(r2)

def adam_step(state, gradients, beta1=0.9, beta2=0.999, eps=1e-8, lr=1e-3):
    '''One Adam step with bias correction

    Arguments:
        state:      an AdamState

        gradients:  dict of name -> gradient, same keys and shapes as state.params

        lr:         learning rate, or a dict of name -> learning rate

    Returns:
        a new AdamState. With beta1 = beta2 = 0 the update is -lr g / (|g| + eps),
        the SignSGD direction
    '''

    t = state.t + 1
    params, m, v = {}, {}, {}
    for k,w in state.params.items():
        g = np.asarray(gradients[k], dtype=np.float64)
        if g.shape != np.shape(w):
            raise p.ShapeError('gradient for {} has the wrong shape'.format(k), expected=np.shape(w), got=g.shape)

        m[k] = beta1 * state.m[k] + (1 - beta1) * g
        v[k] = beta2 * state.v[k] + (1 - beta2) * g * g
        mhat = m[k] / (1 - beta1**t)
        vhat = v[k] / (1 - beta2**t)
        params[k] = w - _lr(lr, k) * mhat / (np.sqrt(vhat) + eps)

    return AdamState(params, m, v, t)

def signsgd_step(state, gradients, lr=1e-3):
    '''One SignSGD step, -lr sign(g), on an AdamState (moments are left untouched).
    Zero gradient entries leave their parameter unchanged. lr may be a dict of
    name -> learning rate
    '''

    params = {k: w - _lr(lr, k) * np.sign(np.asarray(gradients[k], dtype=np.float64)) for k,w in state.params.items()}
    return AdamState(params, state.m, state.v, state.t + 1)

def batch_feature_update_probe(W, batch, probe, lr=None, eta=None):
    '''Feature change for a probe input after one batched SignSGD step

    Arguments:
        W:          weight matrix (n_out, n_in)

        batch:      (Z, D): layer inputs Z (B, n_in) and output gradients D (B, n_out),
                    or a list of (z_in, dz_out) pairs

        probe:      the probe's layer input z_in(x'), length n_in

        lr:         learning rate. Pass None for eta / n_in

        eta:        learning-rate constant. Pass None to use the global default

    Returns:
        W_(t+1) z_in(x') - W_t z_in(x') = -lr sign(sum_i dz_out_i z_in_i^T) z_in(x')

    Example:
        # single datapoint, scalar output: the delta is beta chi S(V) with norm beta sqrt(n)
        batch_feature_update_probe(W, [(z, chi * V)], z)
    '''

    W = np.asarray(W, dtype=np.float64)
    if type(batch) in (list, tuple) and len(batch) and type(batch[0]) in (list, tuple):
        Z = np.array([np.asarray(b[0], dtype=np.float64) for b in batch])
        D = np.array([np.atleast_1d(np.asarray(b[1], dtype=np.float64)) for b in batch])
    else:
        Z, D = (np.asarray(a, dtype=np.float64) for a in batch)

    if Z.ndim != 2 or len(Z) == 0:
        raise p.ShapeError('batch must be non-empty', got=np.shape(Z))

    if Z.shape[1] != W.shape[1] or D.shape != (len(Z), W.shape[0]):
        raise p.ShapeError('batch does not match the weight', expected=W.shape, got=(Z.shape, D.shape))

    if lr is None:
        lr = (p.eta if eta is None else eta) / W.shape[1]

    G = D.T @ Z
    return -lr * (np.sign(G) @ np.asarray(probe, dtype=np.float64))

def run_fig3_experiment(seed=None, n=100, d=100, N=1000, steps=300, lr=1e-3, noise_var=0.025, omega='sqrt', optimizer='adam',
                        out_scale=0.4):
    '''Train all three layers of f(x) = W_2 W_1 W_0 x on a noisy linear target and
    record each layer's feature norms

    Arguments:
        seed:       random seed. Pass None to use the global default

        n, d, N:    width, input dimension and number of datapoints

        steps:      full-batch training steps

        lr:         learning rate of W_0 and W_1. The output layer W_2 steps with
                    lr * s / n, where s is the target scale below

        noise_var:  variance of the label noise

        omega:      'sqrt' draws target weights with standard deviation d^-1/2 (target
                    scale s = 1), 'linear' with d^-1 (s = d^-1/2)

        optimizer:  'adam' (beta1=0.9, beta2=0.999, eps=1e-8) or 'signsgd'

        out_scale:  W_2 starts Gaussian with standard deviation out_scale * s / sqrt(n),
                    so the initial output is a fraction of the target and the fit has
                    to come from alignment rather than from growing weights

    Returns:
        a list of three Trajectories, one per layer, with columns step, gamma,
        gamma_baseline and loss. gamma is the mean over datapoints of |W_l z_in|^2 / n_out
        and gamma_baseline the same for a fixed random direction per datapoint,
        rescaled at every step to the current |z_in|
    '''

    if seed is None:
        seed = p.seed

    if omega not in ('sqrt', 'linear'):
        raise p.ConfigError('omega must be sqrt or linear, got {}'.format(omega))

    if optimizer not in ('adam', 'signsgd'):
        raise p.ConfigError('optimizer must be adam or signsgd, got {}'.format(optimizer))

    if out_scale <= 0:
        raise p.ConfigError('out_scale must be positive, got {}'.format(out_scale))

    scale = 1.0 if omega == 'sqrt' else d ** -0.5
    rng = tensor.Rng(seed).substream('fig3')
    X = rng.substream('x').normal((N, d))
    w = rng.substream('omega').normal(d) * scale * d ** -0.5
    y = X @ w + rng.substream('noise').normal(N) * np.sqrt(noise_var)

    config = LinearNetConfig(n=n, d=d, depth=2, layer=1, eta=p.eta, steps=steps, seed=seed)
    state = init_network(config, rng)
    W2 = rng.substream('out').normal((1, n)) * (out_scale * scale / np.sqrt(n))
    opt = AdamState({'W0': state.weights[0], 'W1': state.weights[1], 'W2': W2})
    lrs = {'W0': lr, 'W1': lr, 'W2': lr * scale / n}
    directions = [rng.substream('baseline', i).normal((N, dim)) for i,dim in enumerate((d, n, n))]
    directions = [G / np.sqrt(np.sum(G * G, axis=1))[:, None] for G in directions]

    gamma = np.zeros((3, steps + 1))
    gamma_b = np.zeros((3, steps + 1))
    losses = np.zeros(steps + 1)
    for t in range(steps + 1):
        W0, W1, W2 = opt.params['W0'], opt.params['W1'], opt.params['W2']
        h0 = X @ W0.T
        h1 = h0 @ W1.T
        f = (h1 @ W2.T).ravel()
        r = f - y
        losses[t] = 0.5 * np.mean(r * r)
        if not np.isfinite(losses[t]):
            raise p.TrainingError('linear network diverged', step=t, loss=losses[t])

        for i,(Win, Z, H) in enumerate(((W0, X, h0), (W1, h0, h1), (W2, h1, f[:, None]))):
            gamma[i, t] = np.mean(np.sum(H * H, axis=1)) / H.shape[1]
            Zt = directions[i] * np.sqrt(np.sum(Z * Z, axis=1))[:, None]
            Ht = Zt @ Win.T
            gamma_b[i, t] = np.mean(np.sum(Ht * Ht, axis=1)) / Ht.shape[1]

        if t == steps:
            break

        # gradients of mean(r^2)/2
        g2 = (r @ h1)[None, :] / N
        dh1 = np.outer(r, W2.ravel()) / N
        g1 = dh1.T @ h0
        g0 = (dh1 @ W1).T @ X
        grads = {'W0': g0, 'W1': g1, 'W2': g2}
        if optimizer == 'adam':
            opt = adam_step(opt, grads, lr=lrs)
        else:
            opt = signsgd_step(opt, grads, lr=lrs)

    logger.info('fig3 run seed=%d: loss %.4g -> %.4g', seed, losses[0], losses[-1])
    meta = {'seed': seed, 'n': n, 'd': d, 'N': N, 'lr': lr, 'noise_var': noise_var, 'omega': omega, 'optimizer': optimizer,
            'out_scale': out_scale}
    return [Trajectory({'step': np.arange(steps + 1), 'gamma': gamma[i], 'gamma_baseline': gamma_b[i], 'loss': losses},
                       dict(meta, layer=i)) for i in range(3)]

def fig3_summary(trajectories, early=200, early_fraction=0.8, baseline_tolerance=0.1):
    '''Growth ratios and qualitative checks for run_fig3_experiment() output

    Checks that every layer's trained-direction norm grows, that baselines stay within
    `baseline_tolerance` of their start, that `early_fraction` of the growth happens by
    step `early`, and that the input layer grows less (relative to its start) than the
    output layer
    '''

    s = LabSummary(experiment='fig3', config=trajectories[0].meta)
    rel = []
    for traj in trajectories:
        i = traj.meta['layer']
        g, gb = traj['gamma'], traj['gamma_baseline']
        growth = g[-1] - g[0]
        rel.append(growth / g[0])
        s['layer{}_growth_ratio'.format(i)] = float(g[-1] / g[0])
        s['layer{}_baseline_ratio'.format(i)] = float(gb[-1] / gb[0])
        s.check('layer{}_grows'.format(i), growth, '> 0', growth > 0)
        drift = float(np.max(np.abs(gb - gb[0])) / gb[0])
        s.check('layer{}_baseline_drift'.format(i), drift, '<= {}'.format(baseline_tolerance), drift <= baseline_tolerance)
        if len(g) > early:
            frac = float((g[early] - g[0]) / growth) if growth != 0 else 0.0
            s.check('layer{}_early_growth'.format(i), frac, '>= {}'.format(early_fraction), frac >= early_fraction)

    s.check('layer0_below_layer2', rel[0] - rel[-1], '< 0', rel[0] < rel[-1])
    return s


def _simulate(state, z, y_hat, z_tilde):
    '''Full matrix SignSGD run on the trainable layer, recording every step 0..T
    '''

    config = state.config
    n = config.n
    V = state.above()
    SV = tensor.signs(V)
    beta = config.lr * tensor.norm_l1(z)

    T = config.steps
    cols = {k: np.zeros(T + 1) for k in ('gamma', 'gamma_baseline', 'chi', 'alpha')}
    for t in range(T + 1):
        u = state.trainable @ z
        ut = state.trainable @ z_tilde
        cols['gamma'][t] = (u @ u) / n
        cols['gamma_baseline'][t] = (ut @ ut) / n
        cols['alpha'][t] = u @ SV
        cols['chi'][t] = tensor.sign(float(V @ u) - y_hat)
        if t < T:
            state = signsgd_single_layer_step(state, z, y_hat)

    return _finish(cols, beta, {'y_hat': y_hat, 'n': n, 'eta': config.eta, 'final_state': state})

def _rollout(config, z, V, u, u_tilde, z_tilde, y_hat):
    '''Feature-space SignSGD run. The update is rank one, so W_t z = W_0 z - beta S(V) sum(chi)
    and W_t z~ moves along S(V) by lr (S(z) . z~) per step
    '''

    n = config.n
    SV = tensor.signs(V)
    beta = config.lr * tensor.norm_l1(z)
    beta_tilde = beta if np.array_equal(z_tilde, z) else config.lr * float(tensor.signs(z) @ z_tilde)

    T = config.steps
    cols = {k: np.zeros(T + 1) for k in ('gamma', 'gamma_baseline', 'chi', 'alpha')}
    for t in range(T + 1):
        cols['gamma'][t] = (u @ u) / n
        cols['gamma_baseline'][t] = (u_tilde @ u_tilde) / n
        cols['alpha'][t] = u @ SV
        chi = tensor.sign(float(V @ u) - y_hat)
        cols['chi'][t] = chi
        if t < T:
            u = u - (beta * chi) * SV
            u_tilde = u_tilde - (beta_tilde * chi) * SV

    return _finish(cols, beta, {'y_hat': y_hat, 'n': n, 'eta': config.eta})

def _finish(cols, beta, meta):
    T = len(cols['gamma']) - 1
    cols['step'] = np.arange(T + 1)
    g0 = cols['gamma'][0]
    cols['Gamma_recursion'] = gamma_prediction(cols['step'], g0, beta, 'recursion')
    cols['Gamma_statement'] = gamma_prediction(cols['step'], g0, beta, 'statement')
    if not all(np.all(np.isfinite(v)) for v in cols.values()):
        raise p.NumericError('trajectory has non-finite values')

    return Trajectory(cols, dict(meta, beta=beta))

def _feature_terms(config, rng):
    '''Draw z_in, V, the target and u = W z_in for the network init_network() would build,
    without forming any n x n matrix. A Gaussian layer with entry variance 1/fan_in maps a
    fixed vector h to N(0, |h|^2 / fan_in) coordinates, independently of the other layers

    Returns:
        (z_in, V, u, y_hat)
    '''

    n = config.n
    x, y_hat = make_datapoint(config, rng)
    draws = rng.substream('features')

    z = draws.substream('below', 0).normal(n) * (tensor.norm_l2(x) / np.sqrt(config.d))
    for i in range(1, config.layer):
        z = draws.substream('below', i).normal(n) * (tensor.norm_l2(z) / np.sqrt(n))

    out = draws.substream('out')
    if config.init == 'uniform':
        V = out.uniform(-1.0 / n, 1.0 / n, n)
    else:
        V = out.normal(n) / n

    for i in range(config.depth - 1, config.layer, -1):
        V = draws.substream('above', i).normal(n) * (tensor.norm_l2(V) / np.sqrt(n))

    u = draws.substream('trainable').normal(n) * (tensor.norm_l2(z) / np.sqrt(n))
    return z, V, u, float(y_hat)

def _joint_output(z, z_tilde, u, rng):
    '''W z~ for the same Gaussian W that gave u = W z: the component of z~ along z maps
    through u, the orthogonal rest through fresh coordinates
    '''

    if np.array_equal(z_tilde, z):
        return np.array(u)

    zn = tensor.norm_l2(z)
    a = float(z_tilde @ z) / zn
    rest = tensor.norm_l2(z_tilde - (a / zn) * z)
    g = rng.substream('features', 'orthogonal').normal(len(z))
    return u * (a / zn) + g * (rest / np.sqrt(len(z)))

def _baseline_input(z, z_baseline, rng):
    if z_baseline is None:
        g = rng.substream('baseline').normal(len(z))
        return g * (tensor.norm_l2(z) / tensor.norm_l2(g))

    if isinstance(z_baseline, str):
        if z_baseline != 'input':
            raise p.ConfigError('z_baseline must be a vector or input, got {}'.format(z_baseline))

        return np.array(z, dtype=np.float64)

    z_baseline = np.asarray(z_baseline, dtype=np.float64)
    if z_baseline.shape != np.shape(z):
        raise p.ShapeError('baseline input does not match the layer input', expected=np.shape(z), got=z_baseline.shape)

    return z_baseline

def _rollout_terms(config, trial):
    '''Returns (f_0, y_hat, z_bar) for trial i
    '''

    z, V, u, y_hat = _feature_terms(config, tensor.Rng(config.seed).substream('trial', trial))
    return float(V @ u), y_hat, tensor.norm_l1(z) * tensor.norm_l1(V) / config.n

def _first_flip(f0, y_hat, step, max_steps):
    '''First step t >= 1 where sign(f_t - y_hat) differs from sign(f_0 - y_hat), capped at max_steps
    '''

    chi0 = tensor.sign(f0 - y_hat)
    f = f0
    for t in range(1, max_steps + 1):
        f = f - step * tensor.sign(f - y_hat)
        if tensor.sign(f - y_hat) != chi0:
            return t

    return max_steps

def _first_flips(config, n_trials, max_steps=None):
    if max_steps is None:
        max_steps = int(np.ceil(20.0 / config.eta))

    taus = []
    for i in range(n_trials):
        f0, y_hat, z_bar = _rollout_terms(config, i)
        taus.append(_first_flip(f0, y_hat, config.eta * z_bar, max_steps))

    return np.array(taus)

def _csv_value(x):
    x = x.item() if hasattr(x, 'item') else x
    if type(x) is float:
        return repr(x)

    return x

def _json_value(x):
    if isinstance(x, dict):
        return {k: _json_value(v) for k,v in x.items() if not isinstance(v, TrainState)}

    if isinstance(x, (list, tuple)):
        return [_json_value(v) for v in x]

    if isinstance(x, np.generic):
        return x.item()

    if isinstance(x, np.ndarray):
        return x.tolist()

    return x

def _lr(lr, name):
    if isinstance(lr, dict):
        if name not in lr:
            raise p.ConfigError('no learning rate for {}'.format(name))

        return lr[name]

    return lr
