
import json
import struct
import numpy as np
import pytest
import nfnplop as plop
from nfnplop.nfn import ActivationBatch
from nfnplop.bundle import magic, write_bundle, read_bundle, read_safetensors, load_tensors, bundle_digest


@pytest.fixture
def written(tmp_path):
    prefix = str(tmp_path / 'activations')
    tensors = {
        'layers.0.attn.q_proj': ActivationBatch('layers.0.attn.q_proj', np.arange(12, dtype=np.float32).reshape(4, 3), module_type='q_proj', layer=0),
        'layers.0.mlp.down_proj': np.linspace(-1, 1, 10).reshape(2, 5),
    }
    path = write_bundle(tensors, prefix, {'seed': 7})
    return prefix, path

def edit_manifest(path, fn):
    with open(path) as fh:
        manifest = json.load(fh)

    fn(manifest)
    with open(path, 'w') as fh:
        json.dump(manifest, fh)

def edit_blob(prefix, fn):
    with open(prefix + '.bin', 'rb') as fh:
        blob = bytearray(fh.read())

    blob = fn(blob)
    with open(prefix + '.bin', 'wb') as fh:
        fh.write(bytes(blob))

def test_round_trip(written):
    prefix, path = written
    assert path == prefix + '.manifest.json'
    b = read_bundle(prefix)
    assert list(b) == ['layers.0.attn.q_proj', 'layers.0.mlp.down_proj']
    assert np.array_equal(b['layers.0.attn.q_proj'], np.arange(12, dtype=np.float32).reshape(4, 3))
    assert b['layers.0.mlp.down_proj'].dtype == np.float32
    assert b.metadata == {'seed': 7}
    assert b.digest.startswith('sha256:')

    batches = b.activations()
    assert batches['layers.0.attn.q_proj'].module_type == 'q_proj'
    assert batches['layers.0.attn.q_proj'].layer == 0
    assert batches['layers.0.mlp.down_proj'].module_type is None

def test_blob_layout(written):
    prefix, path = written
    with open(prefix + '.bin', 'rb') as fh:
        blob = fh.read()

    with open(path) as fh:
        manifest = json.load(fh)

    assert blob[:8] == magic
    assert manifest['blob_length'] == len(blob) == 8 + 4 * (12 + 10)
    assert [e['offset'] for e in manifest['tensors']] == [8, 56]
    assert all(e['dtype'] == 'f32' for e in manifest['tensors'])
    assert struct.unpack('<f', blob[12:16])[0] == 1.0

def test_writer_is_deterministic(tmp_path):
    tensors = {'w': np.ones((2, 2))}
    write_bundle(tensors, str(tmp_path / 'a'))
    write_bundle(tensors, str(tmp_path / 'b'))
    assert (tmp_path / 'a.bin').read_bytes() == (tmp_path / 'b.bin').read_bytes()
    assert bundle_digest(str(tmp_path / 'a.manifest.json')) == bundle_digest(str(tmp_path / 'b.manifest.json'))

def test_duplicate_names(tmp_path):
    with pytest.raises(plop.BundleError):
        write_bundle([('w', np.ones(2)), ('w', np.zeros(2))], str(tmp_path / 'dup'))

def test_missing_files(written, tmp_path):
    with pytest.raises(plop.BundleError):
        read_bundle(str(tmp_path / 'nothing'))

    prefix, _ = written
    (tmp_path / 'activations.bin').unlink()
    with pytest.raises(plop.BundleError):
        read_bundle(prefix)

def test_bad_magic(written):
    prefix, _ = written
    edit_blob(prefix, lambda b: b'NOTABLOB' + b[8:])
    with pytest.raises(plop.BundleError) as err:
        read_bundle(prefix)

    assert err.value.offset == 0

def test_truncated_blob(written):
    prefix, _ = written
    edit_blob(prefix, lambda b: b[:40])
    with pytest.raises(plop.BundleError, match='truncated') as err:
        read_bundle(prefix)

    assert err.value.offset == 40

def test_digest_mismatch(written):
    prefix, _ = written

    def flip(b):
        b[-1] ^= 0xff
        return b

    edit_blob(prefix, flip)
    with pytest.raises(plop.BundleError, match='digest'):
        read_bundle(prefix)

def test_misaligned_entry(written):
    prefix, path = written
    edit_manifest(path, lambda m: m['tensors'][1].update(offset=58))
    with pytest.raises(plop.BundleError, match='misaligned') as err:
        read_bundle(prefix)

    assert err.value.offset == 58

def test_overlapping_entries(written):
    prefix, path = written

    def overlap(m):
        m['tensors'][1].update(offset=16, shape=[2, 5], length=40)

    edit_manifest(path, overlap)
    with pytest.raises(plop.BundleError, match='overlaps'):
        read_bundle(prefix)

def test_entry_out_of_bounds(written):
    prefix, path = written
    edit_manifest(path, lambda m: m['tensors'][1].update(offset=96))
    with pytest.raises(plop.BundleError, match='exceeds') as err:
        read_bundle(prefix)

    assert err.value.offset == 96

def test_shape_length_mismatch(written):
    prefix, path = written
    edit_manifest(path, lambda m: m['tensors'][0].update(shape=[4, 4]))
    with pytest.raises(plop.BundleError, match='does not match'):
        read_bundle(prefix)

def test_unsupported_dtype(written):
    prefix, path = written
    edit_manifest(path, lambda m: m['tensors'][0].update(dtype='f64'))
    with pytest.raises(plop.BundleError, match='unsupported dtype'):
        read_bundle(prefix)

def test_not_a_manifest(tmp_path):
    path = tmp_path / 'x.manifest.json'
    path.write_text('{"format": "other"}')
    with pytest.raises(plop.BundleError):
        read_bundle(str(path))

    path.write_text('{not json')
    with pytest.raises(plop.BundleError, match='malformed'):
        read_bundle(str(path))

def safetensors_bytes(tensors, metadata=None, reverse=False):
    '''tensors: list of (name, dtype, shape, raw bytes)
    '''

    header = {}
    data = b''
    layout = []
    for name,dtype,shape,raw in tensors:
        layout.append((name, dtype, shape, len(data), len(data) + len(raw)))
        data += raw

    if reverse:
        layout.reverse()

    for name,dtype,shape,begin,end in layout:
        header[name] = {'dtype': dtype, 'shape': shape, 'data_offsets': [begin, end]}

    if metadata:
        header['__metadata__'] = metadata

    h = json.dumps(header).encode('utf-8')
    return struct.pack('<Q', len(h)) + h + data

def test_safetensors(tmp_path):
    f32 = np.array([[1.5, -2.0], [0.25, 3.0]], dtype='<f4')
    f16 = np.array([0.5, -1.25, 65504.0], dtype='<f2')
    bf16 = np.array([1.0, -3.5, 0.15625], dtype='<f4')
    bf16_raw = (bf16.view('<u4') >> 16).astype('<u2').tobytes()

    path = tmp_path / 'model.safetensors'
    path.write_bytes(safetensors_bytes([
        ('model.layers.0.self_attn.q_proj.weight', 'F32', [2, 2], f32.tobytes()),
        ('norm', 'F16', [3], f16.tobytes()),
        ('model.layers.0.mlp.up_proj.weight', 'BF16', [1, 3], bf16_raw),
    ], metadata={'format': 'pt'}, reverse=True))

    t = load_tensors(str(path))
    assert np.array_equal(t['model.layers.0.self_attn.q_proj.weight'], f32)
    assert np.array_equal(t['norm'], f16.astype(np.float32))
    assert np.array_equal(t['model.layers.0.mlp.up_proj.weight'], bf16.reshape(1, 3))
    assert all(v.dtype == np.float32 for v in t.values())
    assert t.metadata == {'format': 'pt'}
    assert bundle_digest(str(path)).startswith('sha256:')

def test_safetensors_errors(tmp_path):
    path = tmp_path / 'bad.safetensors'
    path.write_bytes(b'\x01\x02')
    with pytest.raises(plop.BundleError, match='too short'):
        read_safetensors(str(path))

    path.write_bytes(struct.pack('<Q', 1000) + b'{}')
    with pytest.raises(plop.BundleError, match='header length'):
        read_safetensors(str(path))

    path.write_bytes(safetensors_bytes([('w', 'I8', [2], b'\x01\x02')]))
    with pytest.raises(plop.BundleError, match='unsupported dtype'):
        read_safetensors(str(path))

    path.write_bytes(safetensors_bytes([('w', 'F32', [3], b'\x00' * 8)]))
    with pytest.raises(plop.BundleError, match='does not match'):
        read_safetensors(str(path))

def test_safetensors_overlap(tmp_path):
    header = {
        'a': {'dtype': 'F32', 'shape': [2], 'data_offsets': [0, 8]},
        'b': {'dtype': 'F32', 'shape': [2], 'data_offsets': [4, 12]},
    }
    h = json.dumps(header).encode('utf-8')
    path = tmp_path / 'overlap.safetensors'
    path.write_bytes(struct.pack('<Q', len(h)) + h + b'\x00' * 12)
    with pytest.raises(plop.BundleError, match='overlaps'):
        read_safetensors(str(path))

def raw_header(path, header, data=b'\x00' * 8):
    h = json.dumps(header).encode('utf-8')
    path.write_bytes(struct.pack('<Q', len(h)) + h + data)
    return str(path)

@pytest.mark.parametrize('entry', [
    {'dtype': 'F32', 'shape': [1]},
    {'dtype': 'F32', 'shape': [1], 'data_offsets': [0]},
    {'dtype': 'F32', 'shape': [1], 'data_offsets': '0,4'},
    {'dtype': 'F32', 'shape': [1], 'data_offsets': [0.0, 4.0]},
    {'dtype': 'F32', 'shape': 1, 'data_offsets': [0, 4]},
    {'dtype': 'F32', 'shape': [-1], 'data_offsets': [0, 4]},
])
def test_safetensors_malformed_entry(tmp_path, entry):
    with pytest.raises(plop.BundleError, match='must be a list'):
        read_safetensors(raw_header(tmp_path / 'x.safetensors', {'x': entry}))

def test_safetensors_offsets_stay_in_the_data(tmp_path):
    # a negative begin would point back into the JSON header
    with pytest.raises(plop.BundleError, match='out of order'):
        read_safetensors(raw_header(tmp_path / 'x.safetensors', {'x': {'dtype': 'F32', 'shape': [1], 'data_offsets': [-4, 0]}}))

    with pytest.raises(plop.BundleError, match='out of order'):
        read_safetensors(raw_header(tmp_path / 'x.safetensors', {'x': {'dtype': 'F32', 'shape': [1], 'data_offsets': [8, 4]}}))

def test_cli_reports_bad_safetensors(tmp_path, capsys):
    from nfnplop.cli import main

    path = raw_header(tmp_path / 'x.safetensors', {'x': {'dtype': 'F32', 'shape': [1]}})
    act = write_bundle({'x': np.ones((2, 1), dtype=np.float32)}, str(tmp_path / 'act'))
    assert main(['score', '--weights', path, '--activations', act, '--output-dir', str(tmp_path)]) == 1
    assert 'BundleError' in capsys.readouterr().err
