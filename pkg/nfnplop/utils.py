
import fnmatch
import hashlib
import re

_layer_expr = None

def qname(name):
    '''Returns the normalized module name used for matching: lower case, with a
       trailing '.weight' or '.bias' removed. This is used internally

    Examples:
        qname('model.layers.7.self_attn.q_proj.weight')   # 'model.layers.7.self_attn.q_proj'
    '''

    name = name.strip().lower()
    for suffix in ('.weight', '.bias'):
        if name.endswith(suffix):
            return name[:-len(suffix)]

    return name

def qmatch(pattern, name):
    '''Test whether a module name matches a pattern.

       Patterns containing glob characters (*, ?, [) are matched against the whole
       normalized name. Otherwise the pattern must match the trailing dotted
       components of the name, so 'q_proj' matches 'layers.0.attn.q_proj' and
       'attention.wq' matches 'layers.3.attention.wq' but 'proj' does not match 'q_proj'
    '''

    name = qname(name)
    pattern = pattern.strip().lower()
    if any(c in pattern for c in '*?['):
        return fnmatch.fnmatchcase(name, pattern)

    return name == pattern or name.endswith('.' + pattern)

def layer_index(name):
    '''Returns the layer index embedded in a module name, or None

    Examples:
        layer_index('model.layers.12.mlp.down_proj')   # 12
        layer_index('transformer.h.3.attn.c_attn')     # 3
    '''

    global _layer_expr
    if _layer_expr is None:
        _layer_expr = re.compile(r'(?:^|\.)(?:layers?|h|blocks?|decoder\.layers?)\.(\d+)(?:\.|$)')

    m = _layer_expr.search(qname(name))
    if m:
        return int(m.group(1))

    return None

def digest(data):
    '''Returns a short hex content hash for bytes. Used for provenance fields
    '''

    return 'sha256:' + hashlib.sha256(data).hexdigest()

def fmt_score(x):
    '''Two-decimal rendering used by every text report
    '''

    return '{:.2f}'.format(x)
