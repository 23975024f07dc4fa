'''Acceptance checks at full size

The pytest suite exercises the same properties at reduced sizes; `nfnplop
selftest` runs them at the sizes that matter and reports one row per check.
Some checks take a minute or two.
'''

import logging
import os
import shutil
import tempfile
import time
import json
import numpy as np
import nfnplop as p
from . import bundle
from . import corpus
from . import nfn
from . import nfnmap
from . import placement
from . import tensor
from . import theory
from . import transformer

logger = logging.getLogger(__name__)

reference_scores = {'q_proj': 2.58, 'k_proj': 2.63, 'v_proj': 0.97, 'o_proj': 0.90, 'gate_proj': 1.40, 'down_proj': 1.05, 'up_proj': 1.11}

_checks = {}


class Report(p.Table):
    @property
    def passed(self):
        return all(r['result'] == 'pass' for r in self.rows)


def check(number, name):
    '''Register an acceptance check. The function returns (passed, detail)
    '''

    def wrap(fn):
        _checks[number] = (name, fn)
        return fn

    return wrap

def run(numbers=None):
    '''Run acceptance checks

    Arguments:
        numbers:    list of check numbers, or None for all

    Returns:
        a Report; Report.passed is True if every check passed

    Example:
        from nfnplop import selftest
        print(selftest.run([1, 4]))
    '''

    rows = []
    for number in sorted(numbers or _checks):
        if number not in _checks:
            raise p.ConfigError('no check number {}'.format(number))

        name, fn = _checks[number]
        start = time.time()
        try:
            passed, detail = fn()
        except p.NFNError as err:
            passed, detail = False, str(err)

        elapsed = time.time() - start
        logger.info('check %d %s: %s (%.1fs)', number, name, 'pass' if passed else 'FAIL', elapsed)
        rows.append({'#': number, 'check': name, 'result': 'pass' if passed else 'FAIL', 'detail': detail, 'seconds': round(elapsed, 1)})

    return Report(rows, ['#', 'check', 'result', 'detail', 'seconds'], title='nfnplop selftest', footer=False)


@check(1, 'identity and orthogonal neutrality')
def _neutrality():
    worst = 0.0
    for n in (64, 1024):
        rng = tensor.Rng(1).substream('neutral', n)
        I = tensor.identity(n)
        Q = tensor.orthogonal(n, rng.substream('Q'))
        for i in range(100):
            z = tensor.gaussian_vector(n, rng.substream('z', i))
            for W in (I, Q):
                worst = max(worst, abs(nfn.nfn_sample(W, z, 4, rng.substream('draws', i)) - 1.0))

    return worst <= 1e-5, 'max |NFN - 1| = {:.2e}'.format(worst)

@check(2, 'scale invariance (bit-exact for powers of two, rel 1e-6 otherwise)')
def _scale_invariance():
    rng = tensor.Rng(2)
    W = tensor.matrix(rng.substream('W').normal((96, 128)))
    z = tensor.gaussian_vector(128, rng.substream('z'))
    base = nfn.nfn_sample(W, z, 4, tensor.Rng(2, ('draws',)))
    exact = all(nfn.nfn_sample(tensor.matrix(np.asarray(W) * c), z, 4, tensor.Rng(2, ('draws',))) == base for c in (2.0**-10, 1.0, 2.0**10))
    rel = max(abs(nfn.nfn_sample(tensor.matrix(np.asarray(W) * c), z, 4, tensor.Rng(2, ('draws',))) / base - 1) for c in (1e-3, 1e3))

    table = placement.TypeScoreTable.from_scores(reference_scores)
    scaled = placement.TypeScoreTable.from_scores({k: v * 1e3 for k,v in reference_scores.items()})
    argmin = placement.select_lowest(table, 3) == placement.select_lowest(scaled, 3)
    return exact and rel <= 1e-6 and argmin, 'power-of-two exact: {}, max rel {:.1e}, selection invariant: {}'.format(exact, rel, argmin)

@check(3, 'closed form vs Monte Carlo')
def _closed_form():
    worst = 0.0
    n = 1024
    for i in range(20):
        rng = tensor.Rng(3).substream(i)
        W = rng.substream('W').normal((n, n)) / np.sqrt(n)
        z = rng.substream('z').normal(n)
        cf = nfn.nfn_closed_form(W, z)
        mc = nfn.nfn_sample(W, z, 256, rng.substream('draws'))
        worst = max(worst, abs(cf - mc) / cf)

    return worst <= 0.05, 'max relative gap {:.3f}'.format(worst)

@check(4, 'reference score fixture')
def _fixture():
    table = placement.TypeScoreTable.from_scores(reference_scores)
    low = [t.value for t in placement.select_lowest(table, 3)]
    high = [t.value for t in placement.select_highest(table, 3)]
    plan = placement.emit_plan(placement.select_lowest(table, 3), r=16)
    ok = low == ['o_proj', 'v_proj', 'down_proj'] and high == ['k_proj', 'q_proj', 'gate_proj'] and plan.alpha == 32
    return ok, 'plop {} inverse {} alpha {}'.format(low, high, plan.alpha)

@check(5, 'single-layer step identity')
def _step_identity():
    config = theory.LinearNetConfig(n=1024, steps=100, seed=5)
    traj, _ = theory.run_theorem1(config, method='matrix')
    return _identity_errors(traj)

@check(6, 'quasi-quadratic growth and width scaling')
def _quadratic():
    T = _half_window(4096)
    traj, _ = theory.run_theorem1(theory.LinearNetConfig(n=4096, steps=T, seed=6))
    _, r2 = theory.quadratic_fit(traj['step'], traj['gamma'])
    devs = []
    for n in (256, 1024, 4096):
        T = _half_window(n)
        devs.append(np.mean([theory.run_theorem1(theory.LinearNetConfig(n=n, steps=T, seed=s), gamma_form='recursion')[1] for s in range(10)]))

    decreasing = devs[0] > devs[1] > devs[2]
    return r2 >= 0.99 and decreasing, 'R2={:.5f} mean sup deviation {}'.format(r2, ', '.join('{:.3g}'.format(d) for d in devs))

@check(7, 'constant loss-derivative sign')
def _sign_constancy():
    T = _half_window(1024)
    frac = theory.run_sign_constancy(theory.LinearNetConfig(n=1024, eta=0.01, steps=T, seed=0), 100)
    return frac >= 0.95, 'T={} fraction {:.2f}'.format(T, frac)

@check(8, 'random baseline stays flat')
def _baseline():
    n = 4096
    T = _half_window(n)
    traj = theory.run_baseline_flatness(theory.LinearNetConfig(n=n, steps=T, seed=8))
    drift, growth = traj.meta['max_drift'], traj.meta['growth']
    limit = 10 * n ** -0.5 * traj['gamma_baseline'][0]
    return drift <= limit and growth >= 10 * drift, 'drift {:.3g} (limit {:.3g}) growth {:.3g}'.format(drift, limit, growth)

@check(9, 'three-layer Adam feature growth')
def _fig3():
    s = theory.fig3_summary(theory.run_fig3_experiment(seed=9))
    failed = [k for k,c in s['checks'].items() if not c['passed']]
    return s.passed, 'failed: {}'.format(', '.join(failed)) if failed else 'growth ratios {}'.format(
        ', '.join('{:.2f}'.format(s['layer{}_growth_ratio'.format(i)]) for i in range(3)))

@check(10, 'Adam with beta1=beta2=0 is SignSGD')
def _adam_sign():
    rng = tensor.Rng(10)
    for i in range(100):
        w = rng.substream('w', i).normal((8, 16))
        g = rng.substream('g', i).normal((8, 16))
        state = theory.adam_step(theory.AdamState({'w': w}), {'w': g}, beta1=0.0, beta2=0.0, eps=1e-12, lr=1e-3)
        if not np.array_equal(np.sign(state.params['w'] - w), -np.sign(g)):
            return False, 'tensor {} differs'.format(i)

    return True, '100 tensors'

@check(11, 'end-to-end determinism')
def _determinism():
    from . import cli

    root = tempfile.mkdtemp(prefix='nfnplop-')
    saved = p.defaults()
    try:
        outputs = []
        for run,workers in enumerate((1, 8, 1)):
            d = os.path.join(root, str(run))
            common = ['--seed', '11', '--output_dir', d]
            codes = [cli.main(['capture', '--batch', '8', '--seq-len', '32'] + common),
                     cli.main(['score', '--weights', os.path.join(d, 'weights.manifest.json'),
                               '--activations', os.path.join(d, 'activations.manifest.json'), '--workers', str(workers)] + common),
                     cli.main(['plan', '--scores', os.path.join(d, 'nfn-scores.json')] + common)]
            if any(codes):
                return False, 'exit codes {}'.format(codes)

            outputs.append({name: _read(os.path.join(d, name)) for name in sorted(os.listdir(d))})

        same = outputs[0] == outputs[1] == outputs[2]
        with open(os.path.join(root, '0', 'nfn-scores.json'), 'r') as fh:
            scores = [nfn.NFNScore.from_dict(s) for s in json.load(fh)['modules']]

        grid = nfnmap.NFNMap.from_scores(scores).scores
        shape_ok = grid.shape == (2, 7) and np.all(np.isfinite(grid)) and np.all(grid > 0)
        return same and shape_ok, 'identical outputs: {}, map {}'.format(same, grid.shape)
    finally:
        p.configure(**saved)
        shutil.rmtree(root, ignore_errors=True)

@check(12, 'format round trips')
def _round_trips():
    root = tempfile.mkdtemp(prefix='nfnplop-')
    try:
        W = np.arange(12, dtype=np.float32).reshape(3, 4) / 7
        path = bundle.write_bundle({'w': W}, os.path.join(root, 'a'))
        back = bundle.read_bundle(path)
        bundle.write_bundle(dict(back), os.path.join(root, 'b'))
        same = _read(os.path.join(root, 'a.bin')) == _read(os.path.join(root, 'b.bin'))

        values = np.array([[1.5, -2.0], [0.25, 3.0]], dtype='<f4')
        header = json.dumps({'x': {'dtype': 'F32', 'shape': [2, 2], 'data_offsets': [0, 16]}}).encode('utf-8')
        with open(os.path.join(root, 'm.safetensors'), 'wb') as fh:
            fh.write(np.array([len(header)], dtype='<u8').tobytes() + header + values.tobytes())

        st = np.array_equal(bundle.read_safetensors(os.path.join(root, 'm.safetensors'))['x'], values)

        grid = nfnmap.NFNMap(tensor.Rng(12).uniform(0.5, 3.0, (3, 7)))
        nfnmap.export_map(grid, 'csv', os.path.join(root, 'map.csv'))
        parsed = nfnmap.read_map_csv(os.path.join(root, 'map.csv'))
        csv_ok = np.allclose(parsed.scores, grid.scores, rtol=5e-6, atol=0)
        return same and st and csv_ok, 'bundle {}, safetensors {}, csv {}'.format(same, st, csv_ok)
    finally:
        shutil.rmtree(root, ignore_errors=True)

@check(13, 'task similarity direction')
def _task_similarity():
    gaps = []
    for seed in range(5):
        model = transformer.build_model(transformer.TransformerConfig(seed=seed))
        model = transformer.train_toy(model, 'arithmetic', steps=500, seed=seed)
        rng = tensor.Rng(seed)
        a = transformer.nfn_map(model, corpus.synthetic_corpus('arithmetic', 8, 32, 100 + seed), rng=rng)
        b = transformer.nfn_map(model, corpus.synthetic_corpus('shuffled', 8, 32, 100 + seed), rng=rng)
        gaps.append(float(np.mean(a.scores) - np.mean(b.scores)))

    return np.mean(gaps) > 0, 'mean score gap A - B {:.4f}'.format(np.mean(gaps))


def _read(path):
    with open(path, 'rb') as fh:
        return fh.read()

def _identity_errors(traj):
    n, beta = traj.meta['n'], traj.meta['beta']
    g, chi, alpha = traj['gamma'], traj['chi'], traj['alpha']
    step_err = np.max(np.abs((g[1:] - g[:-1]) - (beta**2 - 2 * beta * chi[:-1] * alpha[:-1] / n)))
    alpha_err = np.max(np.abs(alpha[1:] - (alpha[:-1] - beta * chi[:-1] * n)) / np.maximum(1.0, np.abs(alpha[1:])))
    return step_err <= 1e-6 and alpha_err <= 1e-9, 'max step error {:.2e}, alpha error {:.2e}'.format(step_err, alpha_err)

_windows = {}

def _half_window(n):
    if n not in _windows:
        _windows[n] = theory.estimate_window(theory.LinearNetConfig(n=n, eta=0.01, seed=0), 100)

    return max(_windows[n] // 2, 3)
