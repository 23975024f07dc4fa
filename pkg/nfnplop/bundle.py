'''Tensor files: activation/weight bundles and safetensors checkpoints

A bundle is a pair of files sharing a prefix:

    <prefix>.manifest.json   JSON: format, version, blob file name, blob length,
                             sha256 digest of the blob, metadata and a list of
                             tensor entries {name, dtype, shape, offset, length,
                             module_type, layer}
    <prefix>.bin             the 8-byte magic b'NFNBLOB1' followed by raw
                             little-endian float32 data in row-major order

Offsets count from the start of the .bin file and, like lengths, are multiples
of 4. Entries do not overlap and length == 4 * prod(shape).

safetensors files are read only: an 8-byte little-endian header length, a JSON
header of {name: {dtype, shape, data_offsets}} and the raw data. F32, F16 and
BF16 are supported and widened to float32 (exactly).
'''

import json
import os
import numpy as np
import nfnplop as p
from . import nfn
from . import utils

magic = b'NFNBLOB1'

_format = 'nfnplop-bundle'
_version = 1

_safetensor_dtypes = {'F32': '<f4', 'F16': '<f2', 'BF16': '<u2'}


class TensorBundle(dict):
    '''Tensors read from a file: name -> float32 array, in file order

    Attributes:
        entries:    manifest entries (dicts) in file order

        metadata:   metadata recorded by the writer

        digest:     content hash of the data, see bundle_digest()

        path:       the file the bundle was read from
    '''

    def __init__(self, tensors=(), entries=None, metadata=None, digest=None, path=None):
        super(TensorBundle, self).__init__(tensors)
        self.entries = list(entries or [])
        self.metadata = dict(metadata or {})
        self.digest = digest
        self.path = path

    def __repr__(self):
        return 'TensorBundle({} tensors from {})'.format(len(self), self.path)

    def activations(self):
        '''Returns a dict of name -> ActivationBatch for every 2-D tensor
        '''

        out = {}
        for e in self.entries:
            if len(e['shape']) == 2:
                out[e['name']] = nfn.ActivationBatch(e['name'], self[e['name']], module_type=e.get('module_type'), layer=e.get('layer'))

        return out


def write_bundle(tensors, prefix, metadata=None):
    '''Write tensors as a bundle

    Arguments:
        tensors:    a dict of name -> array or ActivationBatch, or a list of
                    (name, array) pairs

        prefix:     output path without extension, e.g. 'results/activations'

        metadata:   optional JSON-serializable dict stored in the manifest

    Returns:
        the manifest path

    Example:
        write_bundle(model.weights(), 'results/weights')
        write_bundle(captured, 'results/activations', {'seed': 0})
    '''

    items = list(tensors.items()) if hasattr(tensors, 'items') else list(tensors)
    seen = set()
    for name,_ in items:
        if name in seen:
            raise p.BundleError(prefix, 'duplicate tensor name {}'.format(name))

        seen.add(name)

    entries = []
    chunks = [magic]
    offset = len(magic)
    for name,value in items:
        module_type = layer = None
        if isinstance(value, nfn.ActivationBatch):
            module_type, layer = value.module_type, value.layer
            value = value.inputs

        arr = np.ascontiguousarray(value, dtype='<f4')
        data = arr.tobytes()
        entry = {'name': name, 'dtype': 'f32', 'shape': list(arr.shape), 'offset': offset, 'length': len(data)}
        if module_type is not None:
            entry['module_type'] = module_type

        if layer is not None:
            entry['layer'] = int(layer)

        entries.append(entry)
        chunks.append(data)
        offset += len(data)

    blob = b''.join(chunks)
    manifest = {
        'format': _format,
        'version': _version,
        'blob': os.path.basename(prefix) + '.bin',
        'blob_length': len(blob),
        'digest': utils.digest(blob),
        'metadata': metadata or {},
        'tensors': entries,
    }

    with open(prefix + '.bin', 'wb') as fh:
        fh.write(blob)

    path = prefix + '.manifest.json'
    with open(path, 'w') as fh:
        fh.write(json.dumps(manifest, indent=2) + '\n')

    return path

def read_bundle(path):
    '''Read a bundle

    Arguments:
        path:       the manifest path, or the prefix it shares with the .bin file

    Returns:
        a TensorBundle

    Notes:
        Bad magic, truncated blobs, entries out of bounds, misaligned or overlapping,
        and digest mismatches raise BundleError with the byte offset involved.
    '''

    if not path.endswith('.manifest.json'):
        path = path + '.manifest.json'

    if not os.path.exists(path):
        raise p.BundleError(path, 'manifest not found')

    with open(path, 'r') as fh:
        try:
            manifest = json.load(fh)
        except ValueError as err:
            raise p.BundleError(path, 'malformed manifest: {}'.format(err))

    if type(manifest) is not dict or manifest.get('format') != _format or type(manifest.get('tensors')) is not list:
        raise p.BundleError(path, 'not a tensor bundle manifest')

    blob_path = os.path.join(os.path.dirname(path), manifest.get('blob', os.path.basename(path)[:-len('.manifest.json')] + '.bin'))
    if not os.path.exists(blob_path):
        raise p.BundleError(blob_path, 'blob not found')

    with open(blob_path, 'rb') as fh:
        blob = fh.read()

    if blob[:len(magic)] != magic:
        raise p.BundleError(blob_path, 'bad magic', offset=0)

    if 'blob_length' in manifest and len(blob) < manifest['blob_length']:
        raise p.BundleError(blob_path, 'blob truncated to {} bytes, manifest expects {}'.format(len(blob), manifest['blob_length']), offset=len(blob))

    digest = utils.digest(blob)
    if manifest.get('digest') and manifest['digest'] != digest:
        raise p.BundleError(blob_path, 'digest mismatch')

    tensors = []
    spans = []
    for e in manifest['tensors']:
        name, offset, length = e.get('name'), e.get('offset'), e.get('length')
        if name is None or type(offset) is not int or type(length) is not int:
            raise p.BundleError(path, 'incomplete manifest entry {}'.format(e))

        if e.get('dtype') != 'f32':
            raise p.BundleError(path, 'unsupported dtype {} for {}'.format(e.get('dtype'), name), offset=offset)

        if offset % 4 or length % 4:
            raise p.BundleError(blob_path, 'misaligned entry {}'.format(name), offset=offset)

        shape = [int(x) for x in e.get('shape', [])]
        if int(np.prod(shape)) * 4 != length:
            raise p.BundleError(path, 'shape {} of {} does not match length {}'.format(shape, name, length), offset=offset)

        if offset < len(magic) or offset + length > len(blob):
            raise p.BundleError(blob_path, 'entry {} exceeds the blob ({} bytes)'.format(name, len(blob)), offset=offset)

        spans.append((offset, length, name))
        arr = np.frombuffer(blob, dtype='<f4', count=length // 4, offset=offset).astype(np.float32, copy=False).reshape(shape)
        tensors.append((name, arr))

    _check_spans(spans, blob_path)
    names = [t[0] for t in tensors]
    if len(set(names)) != len(names):
        raise p.BundleError(path, 'duplicate tensor names')

    return TensorBundle(tensors, manifest['tensors'], manifest.get('metadata'), digest, path)

def read_safetensors(path):
    '''Read a safetensors checkpoint

    Returns:
        a TensorBundle of float32 arrays; F16 and BF16 values are widened exactly.
        The header's __metadata__ is kept as the bundle's metadata

    Example:
        weights = read_safetensors('model.safetensors')
        weights['model.layers.0.self_attn.q_proj.weight'].shape
    '''

    with open(path, 'rb') as fh:
        data = fh.read()

    if len(data) < 8:
        raise p.BundleError(path, 'file too short for a header length', offset=len(data))

    size = int(np.frombuffer(data, dtype='<u8', count=1)[0])
    if 8 + size > len(data):
        raise p.BundleError(path, 'header length {} exceeds the file ({} bytes)'.format(size, len(data)), offset=8)

    try:
        header = json.loads(data[8:8+size].decode('utf-8'))
    except ValueError as err:
        raise p.BundleError(path, 'malformed header: {}'.format(err), offset=8)

    if type(header) is not dict:
        raise p.BundleError(path, 'header is not a JSON object', offset=8)

    base = 8 + size
    metadata = header.pop('__metadata__', None) or {}
    tensors = []
    entries = []
    spans = []
    for name,e in header.items():
        dtype = e.get('dtype') if type(e) is dict else None
        if dtype not in _safetensor_dtypes:
            raise p.BundleError(path, 'unsupported dtype {} for {}'.format(dtype, name))

        offsets = e.get('data_offsets')
        if type(offsets) is not list or len(offsets) != 2 or not all(type(x) is int for x in offsets):
            raise p.BundleError(path, 'data_offsets for {} must be a list of two integers, got {!r}'.format(name, offsets))

        shape = e.get('shape', [])
        if type(shape) is not list or not all(type(x) is int and x >= 0 for x in shape):
            raise p.BundleError(path, 'shape for {} must be a list of nonnegative integers, got {!r}'.format(name, shape))

        begin, end = offsets
        if begin < 0 or begin > end:
            raise p.BundleError(path, 'data_offsets for {} are out of order: {}'.format(name, offsets))

        width = np.dtype(_safetensor_dtypes[dtype]).itemsize
        if base + end > len(data):
            raise p.BundleError(path, 'data for {} exceeds the file ({} bytes)'.format(name, len(data)), offset=base + begin)

        if (end - begin) != int(np.prod(shape)) * width:
            raise p.BundleError(path, 'shape {} of {} does not match its {} bytes'.format(shape, name, end - begin), offset=base + begin)

        spans.append((base + begin, end - begin, name))
        raw = np.frombuffer(data, dtype=_safetensor_dtypes[dtype], count=(end - begin) // width, offset=base + begin)
        if dtype == 'BF16':
            arr = (raw.astype(np.uint32) << 16).view(np.float32)
        else:
            arr = raw.astype(np.float32)

        tensors.append((name, arr.reshape(shape)))
        entries.append({'name': name, 'dtype': dtype, 'shape': shape, 'offset': base + begin, 'length': end - begin})

    # safetensors stores entries in any order
    _check_spans(spans, path)
    return TensorBundle(tensors, entries, metadata, utils.digest(data), path)

def load_tensors(path):
    '''Read a .safetensors file or a bundle, by file name
    '''

    if path.endswith('.safetensors'):
        return read_safetensors(path)

    return read_bundle(path)

def bundle_digest(path):
    '''Content hash used for plan provenance: the blob digest recorded in a bundle
    manifest, or the hash of a whole safetensors file

    Example:
        bundle_digest('results/activations.manifest.json')   # 'sha256:9f2c...'
    '''

    if path.endswith('.safetensors'):
        with open(path, 'rb') as fh:
            return utils.digest(fh.read())

    return read_bundle(path).digest


def _check_spans(spans, path):
    end = 0
    last = None
    for offset,length,name in sorted(spans):
        if offset < end:
            raise p.BundleError(path, 'entry {} overlaps {}'.format(name, last), offset=offset)

        end = max(end, offset + length)
        last = name
