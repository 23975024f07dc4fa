'''Dense vectors, matrices and seeded random streams

Vectors and matrices are plain numpy arrays: 1-D and 2-D, float32, finite,
and read-only once built by vector() or matrix(). Norms and dot products
accumulate in float64.

Random streams come from Rng, a thin wrapper over numpy's counter-based
Philox generator. Substreams are keyed by (seed, labels) so that work split
across threads draws the same numbers no matter how it is scheduled.
'''

import hashlib
import numpy as np
import nfnplop as p


def vector(data):
    '''Build a Vector

    Arguments:
        data:       any sequence of numbers or a 1-D array

    Returns:
        a read-only float32 numpy array

    Example:
        z = nfnplop.tensor.vector([1, 2, 3])
    '''

    v = np.array(data, dtype=np.float32)
    if v.ndim != 1 or v.size == 0:
        raise p.ShapeError('a vector must be 1-dimensional and non-empty', expected='(dim,)', got=v.shape)

    if not np.all(np.isfinite(v)):
        raise p.NumericError('vector has non-finite entries')

    v.setflags(write=False)
    return v

def matrix(data):
    '''Build a Matrix

    Arguments:
        data:       nested sequences or a 2-D array, row-major

    Returns:
        a read-only float32 numpy array of shape (rows, cols)
    '''

    w = np.array(data, dtype=np.float32)
    if w.ndim != 2 or w.size == 0:
        raise p.ShapeError('a matrix must be 2-dimensional and non-empty', expected='(rows, cols)', got=w.shape)

    if not np.all(np.isfinite(w)):
        raise p.NumericError('matrix has non-finite entries')

    w.setflags(write=False)
    return w

def identity(n):

    return matrix(np.eye(n, dtype=np.float32))

def orthogonal(n, rng):
    '''Returns a random n x n orthogonal matrix (QR of a Gaussian matrix, signs fixed
    so the distribution is Haar)
    '''

    q, r = np.linalg.qr(rng.normal((n, n)))
    q = q * np.where(np.diag(r) < 0, -1.0, 1.0)
    return matrix(q)

def matvec(W, z):
    '''Returns W z

    Arguments:
        W:          a Matrix

        z:          a Vector with W.cols entries

    Returns:
        a Vector with W.rows entries

    Example:
        matvec(matrix([[1, 2], [3, 4]]), vector([1, 1]))   # [3, 7]
    '''

    if W.ndim != 2 or z.ndim != 1 or W.shape[1] != z.shape[0]:
        raise p.ShapeError('matvec dimension mismatch', expected='({}, {}) x ({},)'.format(W.shape[0], W.shape[-1], W.shape[-1]), got='{} x {}'.format(W.shape, z.shape))

    return vector(np.asarray(W, dtype=np.float64) @ np.asarray(z, dtype=np.float64))

def norm_l2(z):

    return float(np.sqrt(np.sum(np.square(np.asarray(z, dtype=np.float64)))))

def norm_l1(z):

    return float(np.sum(np.abs(np.asarray(z, dtype=np.float64))))

def norm_frobenius(W):

    return norm_l2(np.ravel(W))

def sign(x):
    '''Sign with sign(0) == +1, matching the SignSGD convention of mapping the
    zero branch to +1

    Returns:
        +1 or -1
    '''

    if x != x:
        raise p.NumericError('sign of NaN is undefined')

    return 1 if x >= 0 else -1

def signs(a):
    '''Elementwise sign() over an array, returned as float64 +/-1
    '''

    a = np.asarray(a)
    if np.any(np.isnan(a)):
        raise p.NumericError('sign of NaN is undefined')

    return np.where(a >= 0, 1.0, -1.0)

def gaussian_vector(dim, rng):
    '''Returns a Vector of iid standard normal draws

    Arguments:
        dim:        positive dimension

        rng:        an Rng; draws come from its stream

    Notes:
        numpy's Generator uses the ziggurat method for standard normals
    '''

    if dim < 1:
        raise p.ShapeError('dimension must be positive', got=dim)

    return vector(rng.normal(dim))

def rescale_to_norm(z, target):
    '''Returns z scaled to have L2 norm equal to target

    Arguments:
        z:          a Vector

        target:     a nonnegative float

    Example:
        rescale_to_norm(vector([3, 4]), 10)   # [6, 8]
    '''

    if target < 0:
        raise p.NumericError('target norm must be nonnegative, got {}'.format(target))

    n = norm_l2(z)
    if target == 0:
        return vector(np.zeros(len(z)))

    if n == 0:
        raise p.NumericError('cannot rescale a zero vector to norm {}'.format(target))

    return vector(np.asarray(z, dtype=np.float64) * (target / n))


class Rng():
    '''A reproducible random stream

    Arguments:
        seed:       64-bit unsigned seed. Pass None to use the global default

        labels:     labels identifying a substream; normally built by substream()

    Example:
        root = Rng(7)
        a = root.substream('layers.0.attn.q_proj', 12).normal(64)
    '''

    def __init__(self, seed=None, labels=()):
        if seed is None:
            seed = p.seed

        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.labels = tuple(str(x) for x in labels)
        self._gen = np.random.Generator(np.random.Philox(key=_derive_key(self.seed, self.labels)))

    def __repr__(self):
        return 'Rng(seed={}, labels={})'.format(self.seed, self.labels)

    def substream(self, *labels):
        '''Returns an independent Rng for (seed, labels + new labels). The parent's
        own position in its stream has no effect on the result
        '''

        return Rng(self.seed, self.labels + tuple(str(x) for x in labels))

    def normal(self, size):
        return self._gen.standard_normal(size)

    def uniform(self, low, high, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high, size=None):
        return self._gen.integers(low, high, size)

    def choice(self, a, size=None):
        return self._gen.choice(a, size)

    def permutation(self, x):
        return self._gen.permutation(x)


def _derive_key(seed, labels):
    h = hashlib.blake2b(digest_size=16)
    h.update(seed.to_bytes(8, 'little'))
    for label in labels:
        b = label.encode('utf-8')
        h.update(len(b).to_bytes(4, 'little'))
        h.update(b)

    return int.from_bytes(h.digest(), 'little')
