'''Normalized Feature Norm scores

For a weight W and an input z_in, the score compares the feature norm on the
real input with the feature norm on random inputs of the same norm:

    NFN(W, z_in) = ||W z_in||^2 / mean_k ||W z~_k||^2

where each z~_k has iid Gaussian coordinates rescaled to ||z_in||. Scores near 1
mean W is not aligned with the data; scores above 1 mean it is. The
'unsquared' convention returns the square root of the same ratio.

Baseline draws for sample i of module NAME come from rng.substream(NAME, i), so
scores do not depend on how modules are spread over worker threads.
'''

import logging
import concurrent.futures
import numpy as np
import nfnplop as p
from . import tensor

logger = logging.getLogger(__name__)

# rows per matmul block when scoring a dataset
_block = 256


class ActivationBatch():
    '''The input vectors a module saw, one row per token position per sequence

    Arguments:
        module_name:    name of the module the inputs belong to

        inputs:         2-D array (n_vectors, input_dim), or a list of vectors

        module_type:    optional canonical type name, e.g. 'q_proj'

        layer:          optional layer index
    '''

    def __init__(self, module_name, inputs, module_type=None, layer=None):
        if type(inputs) in (list, tuple):
            if len(inputs) == 0:
                raise p.ShapeError('activation batch for {} is empty'.format(module_name))

            inputs = np.stack([np.asarray(v, dtype=np.float32) for v in inputs])

        inputs = np.asarray(inputs, dtype=np.float32)
        if inputs.ndim != 2 or inputs.shape[0] == 0 or inputs.shape[1] == 0:
            raise p.ShapeError('activation batch for {} must be a non-empty 2-D array'.format(module_name), expected='(n_vectors, input_dim)', got=inputs.shape)

        self.module_name = module_name
        self.inputs = inputs
        self.input_dim = inputs.shape[1]
        self.module_type = module_type
        self.layer = layer

    def __len__(self):
        return self.inputs.shape[0]

    def __iter__(self):
        return iter(self.inputs)

    def __repr__(self):
        return 'ActivationBatch({}, {} x {})'.format(self.module_name, len(self), self.input_dim)


class NFNScore():
    '''Score of one module over a dataset, with the statistics behind it
    '''

    _fields = ['module_name', 'score', 'n_samples', 'mean_feature_sqnorm', 'mean_baseline_sqnorm',
               'm_baseline_draws', 'n_skipped', 'convention', 'module_type', 'layer']

    def __init__(self, module_name, score, n_samples, mean_feature_sqnorm, mean_baseline_sqnorm,
                 m_baseline_draws, n_skipped=0, convention='squared', module_type=None, layer=None):
        self.module_name = module_name
        self.score = float(score)
        self.n_samples = int(n_samples)
        self.mean_feature_sqnorm = float(mean_feature_sqnorm)
        self.mean_baseline_sqnorm = float(mean_baseline_sqnorm)
        self.m_baseline_draws = int(m_baseline_draws)
        self.n_skipped = int(n_skipped)
        self.convention = convention
        self.module_type = module_type
        self.layer = layer

    def __repr__(self):
        return 'NFNScore({}: {:.4f}, n={}, m={})'.format(self.module_name, self.score, self.n_samples, self.m_baseline_draws)

    def __eq__(self, other):
        return type(other) is NFNScore and self.to_dict() == other.to_dict()

    def to_dict(self):
        return {k: getattr(self, k) for k in self._fields}

    @classmethod
    def from_dict(cls, d):
        '''Build from a dict. Only module_name and score are required: missing
        statistics read as zero draws and NaN norms
        '''

        if type(d) is not dict or 'module_name' not in d or 'score' not in d:
            raise p.ConfigError('a score record needs module_name and score, got {!r}'.format(d))

        args = {'n_samples': 0, 'mean_feature_sqnorm': float('nan'), 'mean_baseline_sqnorm': float('nan'), 'm_baseline_draws': 0}
        args.update({k: d[k] for k in cls._fields if d.get(k) is not None})
        try:
            return cls(**args)
        except (TypeError, ValueError):
            raise p.ConfigError('malformed score record {!r}'.format(d))


def baseline_inputs(z_in, m=None, rng=None):
    '''Random inputs for the NFN denominator

    Arguments:
        z_in:       the real input Vector

        m:          number of draws. Pass None to use the global default

        rng:        an Rng. Pass None for Rng() on the global seed

    Returns:
        a list of m Vectors, each with iid Gaussian coordinates rescaled to ||z_in||

    Example:
        for zt in baseline_inputs(z, m=4, rng=Rng(3)):
            print(norm_l2(zt))
    '''

    z = np.asarray(z_in, dtype=np.float64)
    return [tensor.vector(row) for row in _baseline_draws(z, _check_m(m), rng or tensor.Rng())]

def nfn_sample(W, z_in, m=None, rng=None, convention=None):
    '''NFN score of W on a single input

    Arguments:
        W:          weight Matrix (rows = output dim, cols = input dim)

        z_in:       input Vector with W.cols entries

        m:          baseline draws averaged in the denominator. Pass None to use the global default

        rng:        an Rng for the baseline draws. Pass None for Rng() on the global seed

        convention: 'squared' or 'unsquared'. Pass None to use the global default

    Returns:
        ||W z_in||^2 / mean_k ||W z~_k||^2 (or its square root for 'unsquared')

    Example:
        nfn_sample(identity(8), gaussian_vector(8, Rng(1)))   # 1.0
    '''

    W = np.asarray(W)
    z = np.asarray(z_in)
    if W.ndim != 2 or z.ndim != 1 or W.shape[1] != z.shape[0]:
        raise p.ShapeError('input does not match weight columns', expected=W.shape[-1], got=z.shape)

    W64 = W.astype(np.float64)
    num, den = _sample_terms(W64, z.astype(np.float64), _check_m(m), rng or tensor.Rng())
    return _ratio(num, den, _check_convention(convention))

def nfn_dataset(W, batch, m=None, rng=None, convention=None):
    '''NFN score of W averaged over every input vector in a batch

    Arguments:
        W:          weight Matrix

        batch:      an ActivationBatch

        m:          baseline draws per input. Pass None to use the global default

        rng:        the root Rng; sample i draws from rng.substream(batch.module_name, i).
                    Pass None for Rng() on the global seed

        convention: 'squared' or 'unsquared'. Pass None to use the global default

    Returns:
        an NFNScore

    Notes:
        Zero-norm input rows (e.g. padding positions) are skipped and counted in
        NFNScore.n_skipped; a warning is issued when any are skipped.
    '''

    W = np.asarray(W)
    if W.ndim != 2 or W.shape[1] != batch.input_dim:
        raise p.ShapeError('activations for {} do not match weight columns'.format(batch.module_name), expected=W.shape[-1], got=batch.input_dim)

    m = _check_m(m)
    convention = _check_convention(convention)
    rng = rng or tensor.Rng()

    W64 = W.astype(np.float64)
    Z = batch.inputs.astype(np.float64)
    norms = np.sqrt(np.sum(Z * Z, axis=1))
    keep = np.flatnonzero(norms > 0)
    n_skipped = len(Z) - len(keep)
    if len(keep) == 0:
        raise p.NumericError('every input row for {} has zero norm'.format(batch.module_name))

    if n_skipped:
        p.warn('{}: skipped {} zero-norm input rows of {}'.format(batch.module_name, n_skipped, len(Z)))

    ratios = []
    nums = []
    dens = []
    for start in range(0, len(keep), _block):
        idx = keep[start:start+_block]
        Zb = Z[idx]
        num = np.sum(np.square(Zb @ W64.T), axis=1)

        # baseline draws are made per sample from that sample's own substream
        G = np.concatenate([rng.substream(batch.module_name, int(i)).normal((m, Z.shape[1])) for i in idx])
        G = G * (np.repeat(norms[idx], m) / np.sqrt(np.sum(G * G, axis=1)))[:, None]
        den = np.mean(np.sum(np.square(G @ W64.T), axis=1).reshape(len(idx), m), axis=1)
        if np.any(den == 0):
            raise p.NumericError('{}: baseline images are all zero (zero weight matrix?)'.format(batch.module_name))

        nums.append(num)
        dens.append(den)
        ratios.append(num / den)

    ratios = np.concatenate(ratios)
    if convention == 'unsquared':
        ratios = np.sqrt(ratios)

    return NFNScore(batch.module_name, float(np.mean(ratios)), len(keep),
                    float(np.mean(np.concatenate(nums))), float(np.mean(np.concatenate(dens))),
                    m, n_skipped=n_skipped, convention=convention,
                    module_type=batch.module_type, layer=batch.layer)

def nfn_closed_form(W, z_in, convention=None):
    '''Large-width closed form of the NFN score

    Arguments:
        W:          nonzero weight Matrix

        z_in:       nonzero input Vector

        convention: 'squared' or 'unsquared'. Pass None to use the global default

    Returns:
        n_in * ||W z||^2 / (||W||_F^2 ||z||^2), or its square root for 'unsquared'

    Notes:
        For z~ uniform on the sphere of radius ||z||, E ||W z~||^2 = ||z||^2 ||W||_F^2 / n_in,
        so the input dimension n_in appears in the normalizer. Without it the
        expression is off by a factor of n_in (sqrt(n_in) unsquared).
    '''

    W = np.asarray(W, dtype=np.float64)
    z = np.asarray(z_in, dtype=np.float64)
    if W.ndim != 2 or z.ndim != 1 or W.shape[1] != z.shape[0]:
        raise p.ShapeError('input does not match weight columns', expected=W.shape[-1], got=z.shape)

    wf = np.sum(W * W)
    zn = np.sum(z * z)
    if wf == 0 or zn == 0:
        raise p.NumericError('closed form needs a nonzero weight and a nonzero input')

    y = W @ z
    return _ratio(W.shape[1] * np.sum(y * y), wf * zn, _check_convention(convention))

def score_modules(weights, activations, m=None, rng=None, workers=None, convention=None):
    '''Score every module that has captured activations

    Arguments:
        weights:        a mapping of module name to weight Matrix

        activations:    a mapping of module name to ActivationBatch (or an iterable of batches)

        m:              baseline draws per input. Pass None to use the global default

        rng:            the root Rng. Pass None for Rng() on the global seed

        workers:        thread pool size. Pass None to use the global default

        convention:     'squared' or 'unsquared'. Pass None to use the global default

    Returns:
        a list of NFNScore objects in the order of activations

    Example:
        scores = nfnplop.nfn.score_modules(weights, captured, m=4, rng=Rng(0), workers=8)
    '''

    if workers is None:
        workers = p.workers

    if hasattr(activations, 'values'):
        batches = list(activations.values())
    else:
        batches = list(activations)

    missing = [b.module_name for b in batches if b.module_name not in weights]
    if missing:
        raise p.ModuleTypeError(missing, 'no weights for modules')

    rng = rng or tensor.Rng()
    m = _check_m(m)
    convention = _check_convention(convention)

    def work(b):
        logger.debug('scoring %s (%d inputs)', b.module_name, len(b))
        return nfn_dataset(weights[b.module_name], b, m, rng, convention)

    if workers <= 1:
        results = [work(b) for b in batches]
    else:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, batches))

    logger.info('scored %d modules with m=%d on %d workers', len(results), m, workers)
    return results


def _check_m(m):
    if m is None:
        m = p.m

    if int(m) < 1:
        raise p.ConfigError('m must be at least 1, got {}'.format(m))

    return int(m)

def _check_convention(convention):
    if convention is None:
        convention = p.convention

    if convention not in ('squared', 'unsquared'):
        raise p.ConfigError('convention must be squared or unsquared, got {}'.format(convention))

    return convention

def _baseline_draws(z, m, rng):
    '''Returns an (m, n) float64 array of Gaussian rows rescaled to ||z||
    '''

    zn = np.sqrt(np.sum(z * z))
    if zn == 0:
        raise p.NumericError('baseline inputs need a nonzero input vector')

    G = rng.normal((m, len(z)))
    return G * (zn / np.sqrt(np.sum(G * G, axis=1)))[:, None]

def _sample_terms(W64, z, m, rng):
    num = np.sum(np.square(W64 @ z))
    B = _baseline_draws(z, m, rng)
    den = np.mean(np.sum(np.square(B @ W64.T), axis=1))
    if den == 0:
        raise p.NumericError('baseline images are all zero (zero weight matrix?)')

    return num, den

def _ratio(num, den, convention):
    r = float(num / den)
    if convention == 'unsquared':
        return float(np.sqrt(r))

    return r
