'''Byte-level token corpora for the toy transformer

Two synthetic tasks are available:

    arithmetic      a stream of additions like "17+5=22;"
    shuffled        the same characters with each sequence's positions permuted

Both use the byte value of each character as its token id, so the vocabulary
is 256.
'''

import json
import numpy as np
import nfnplop as p
from . import tensor

tasks = ['arithmetic', 'shuffled']

vocab_size = 256
pad_token = 0


def synthetic_corpus(task, n_sequences, seq_len, seed=None):
    '''Generate token sequences for a synthetic task

    Arguments:
        task:           'arithmetic' or 'shuffled'

        n_sequences:    number of sequences

        seq_len:        tokens per sequence

        seed:           random seed. Pass None to use the global default

    Returns:
        an int64 array of shape (n_sequences, seq_len)

    Example:
        tokens = synthetic_corpus('arithmetic', 8, 32, seed=1)
        decode(tokens[0])     # e.g. '3+41=44;90+7=97;12+68=80;5+'
    '''

    if task not in tasks:
        raise p.ConfigError('unknown task {}; expected one of {}'.format(task, ', '.join(tasks)))

    if n_sequences < 1 or seq_len < 1:
        raise p.ConfigError('n_sequences and seq_len must be positive')

    rng = tensor.Rng(seed).substream('corpus')
    tokens = np.zeros((n_sequences, seq_len), dtype=np.int64)
    for i in range(n_sequences):
        s = _arithmetic_text(rng.substream('text', i), seq_len)
        row = np.frombuffer(s.encode('ascii'), dtype=np.uint8).astype(np.int64)
        if task == 'shuffled':
            row = rng.substream('shuffle', i).permutation(row)

        tokens[i] = row

    return tokens

def pad_mask(lengths, seq_len):
    '''Returns a bool array (len(lengths), seq_len) that is True at the first lengths[i]
    positions of row i
    '''

    lengths = np.asarray(lengths)
    if np.any(lengths < 0) or np.any(lengths > seq_len):
        raise p.ShapeError('sequence lengths must be within [0, {}]'.format(seq_len), got=lengths.tolist())

    return np.arange(seq_len)[None, :] < lengths[:, None]

def load_tokens(path):
    '''Read token sequences from a file

    Arguments:
        path:       a .json file holding a list of int lists, or a text file with one
                    sequence of whitespace-separated ints per line

    Returns:
        (tokens, mask): sequences padded with 0 to the longest length, and the pad mask.
        mask is None when all sequences have the same length
    '''

    with open(path, 'r') as fh:
        if path.endswith('.json'):
            try:
                rows = json.load(fh)
            except ValueError as err:
                raise p.ConfigError('{}: {}'.format(path, err))
        else:
            try:
                rows = [[int(x) for x in line.split()] for line in fh if line.strip()]
            except ValueError as err:
                raise p.ConfigError('{}: {}'.format(path, err))

    if type(rows) is not list or len(rows) == 0 or any(type(r) is not list or len(r) == 0 for r in rows):
        raise p.ConfigError('{}: expected a non-empty list of non-empty token sequences'.format(path))

    lengths = [len(r) for r in rows]
    width = max(lengths)
    tokens = np.full((len(rows), width), pad_token, dtype=np.int64)
    for i,r in enumerate(rows):
        tokens[i, :len(r)] = r

    if min(lengths) == width:
        return tokens, None

    return tokens, pad_mask(lengths, width)

def decode(row):
    return bytes(int(x) for x in row).decode('latin-1')


def _arithmetic_text(rng, seq_len):
    parts = []
    size = 0
    while size < seq_len:
        a, b = (int(x) for x in rng.integers(0, 100, 2))
        s = '{}+{}={};'.format(a, b, a + b)
        parts.append(s)
        size += len(s)

    return ''.join(parts)[:seq_len]
