'''NFN maps: per-module scores arranged layers x module types

A map can be exported as CSV (one row per layer), as an SVG heatmap with a
diverging colour scale centred on a score of 1.0, or as the per-type text block
printed by `nfnplop score`.
'''

import csv
import numpy as np
from tabulate import tabulate
import nfnplop as p
from . import placement
from . import utils

try:
    import pandas as pd
except ImportError:
    pd = None

formats = ['csv', 'svg', 'text']

# colour scale: scores are clamped to [low, high]; 1.0 is the neutral colour
scale_low = 0.5
scale_high = 3.0
_neutral = (0xf7, 0xf7, 0xf7)
_cold = (0x21, 0x66, 0xac)
_hot = (0xb2, 0x18, 0x2b)

_cell_w = 72
_cell_h = 28
_margin_x = 64
_margin_y = 36


class NFNMap():
    '''A dense grid of NFN scores

    Arguments:
        scores:     2-D array (layers, len(types)) of positive finite scores

        types:      ordered list of ModuleType (or type names). Pass None for all seven
                    in canonical order

        metadata:   dict with seed, dataset, m and convention

    Example:
        grid = NFNMap.from_scores(nfnplop.nfn.score_modules(weights, captured))
        grid.column('q_proj')
    '''

    def __init__(self, scores, types=None, metadata=None):
        self.types = [placement.ModuleType.parse(t) for t in (types or list(placement.ModuleType))]
        scores = np.array(scores, dtype=np.float64)
        if scores.ndim != 2 or scores.shape[1] != len(self.types) or scores.shape[0] == 0:
            raise p.ShapeError('map grid does not match its types', expected='(layers, {})'.format(len(self.types)), got=scores.shape)

        if not np.all(np.isfinite(scores)):
            raise p.NumericError('map has non-finite scores')

        if not np.all(scores > 0):
            raise p.NumericError('map scores must be positive, got minimum {}'.format(scores.min()))

        self.scores = scores
        self.layers = scores.shape[0]
        self.metadata = dict(metadata or {})

    def __repr__(self):
        return tabulate(self._rows(), tablefmt='simple', headers=['layer'] + [t.value for t in self.types], floatfmt='.2f')

    def _repr_html_(self):
        return p.htmlTable(self._rows(), headers=['layer'] + [t.value for t in self.types], floatfmt='.2f')

    def __eq__(self, other):
        return type(other) is NFNMap and self.types == other.types and np.array_equal(self.scores, other.scores)

    def _rows(self):
        return [[i] + list(row) for i,row in enumerate(self.scores)]

    def column(self, t):
        return self.scores[:, self.types.index(placement.ModuleType.parse(t))]

    def type_table(self):
        '''Column means as a TypeScoreTable, in the map's type order
        '''

        table = placement.TypeScoreTable()
        for j,t in enumerate(self.types):
            table[t] = (float(np.mean(self.scores[:, j])), self.layers)

        return table

    @classmethod
    def from_scores(cls, scores, metadata=None, aliases=None):
        '''Arrange module scores into a grid

        Arguments:
            scores:     NFNScore objects. Each module's layer comes from its `layer` field or
                        its name; its type from its `module_type` field or resolve_type()

            metadata:   dict recorded on the map

            aliases:    optional name pattern -> type mapping, see placement.resolve_type()

        Returns:
            an NFNMap whose types are the module types present, in canonical order.
            Several modules in one cell are averaged
        '''

        cells = {}
        unresolved = []
        for s in scores:
            t = placement.ModuleType.parse(s.module_type) if s.module_type else placement.resolve_type(s.module_name, aliases)
            layer = s.layer if s.layer is not None else utils.layer_index(s.module_name)
            if t is None or layer is None:
                unresolved.append(s.module_name)
                continue

            cells.setdefault((layer, t), []).append(s.score)

        if unresolved:
            raise p.ModuleTypeError(unresolved, 'cannot place modules in the map')

        if not cells:
            raise p.ShapeError('no scores to arrange')

        layers = sorted(set(k[0] for k in cells))
        types = [t for t in placement.ModuleType if any(k[1] == t for k in cells)]
        missing = ['layer {} {}'.format(i, t.value) for i in layers for t in types if (i, t) not in cells]
        if missing:
            raise p.ModuleTypeError(missing, 'map has empty cells')

        grid = [[float(np.mean(sorted(cells[(i, t)]))) for t in types] for i in layers]
        meta = dict(metadata or {})
        meta.setdefault('layer_index', layers)
        return cls(grid, types, meta)


def export_map(nmap, format, path=None):
    '''Render an NFNMap

    Arguments:
        nmap:       an NFNMap

        format:     'csv', 'svg' or 'text'

        path:       file to write. Pass None to only return the text

    Returns:
        the rendered text. The same map always renders to the same bytes

    Example:
        export_map(grid, 'svg', 'results/nfn-map.svg')
    '''

    if format == 'csv':
        text = _csv(nmap)
    elif format == 'svg':
        text = _svg(nmap)
    elif format == 'text':
        text = nmap.type_table().text_block()
    else:
        raise p.ConfigError('unknown format {}; expected one of {}'.format(format, ', '.join(formats)))

    if path is not None:
        with open(path, 'w', newline='') as fh:
            fh.write(text)

    return text

def read_map_csv(path):
    '''Read a map written by export_map(..., 'csv')

    Returns:
        an NFNMap; metadata holds the layer indices from the first column
    '''

    with open(path, 'r', newline='') as fh:
        rows = list(csv.reader(fh))

    if len(rows) < 2 or len(rows[0]) < 2 or rows[0][0] != 'layer':
        raise p.ConfigError('{}: not an NFN map CSV'.format(path))

    types = rows[0][1:]
    try:
        layers = [int(r[0]) for r in rows[1:]]
        grid = [[float(x) for x in r[1:]] for r in rows[1:]]
    except (ValueError, IndexError) as err:
        raise p.ConfigError('{}: {}'.format(path, err))

    return NFNMap(grid, types, {'layer_index': layers})

def cell_color(score):
    '''Hex colour for a score: blue below 1.0, neutral at 1.0, red above, clamped
    to [scale_low, scale_high]

    Example:
        cell_color(1.0)     # '#f7f7f7'
    '''

    s = min(max(float(score), scale_low), scale_high)
    if s >= 1.0:
        target, t = _hot, (s - 1.0) / (scale_high - 1.0)
    else:
        target, t = _cold, (1.0 - s) / (1.0 - scale_low)

    rgb = [int(round(n + (c - n) * t)) for n,c in zip(_neutral, target)]
    return '#{:02x}{:02x}{:02x}'.format(*rgb)

def DataFrame(nmap):
    '''Returns the map as a pandas DataFrame indexed by layer with one column per type
    '''

    if pd is None:
        raise ModuleNotFoundError('you must install pandas to use this feature')

    index = nmap.metadata.get('layer_index', list(range(nmap.layers)))
    df = pd.DataFrame(nmap.scores, index=index, columns=[t.value for t in nmap.types])
    df.index.name = 'layer'
    return df


def _csv(nmap):
    index = nmap.metadata.get('layer_index', list(range(nmap.layers)))
    lines = [','.join(['layer'] + [t.value for t in nmap.types])]
    for i,row in zip(index, nmap.scores):
        lines.append(','.join([str(i)] + [repr(float(x)) for x in row]))

    return '\n'.join(lines) + '\n'

def _svg(nmap):
    index = nmap.metadata.get('layer_index', list(range(nmap.layers)))
    width = _margin_x + _cell_w * len(nmap.types)
    height = _margin_y + _cell_h * nmap.layers
    out = []
    out.append('<svg xmlns="http://www.w3.org/2000/svg" width="%d" height="%d" viewBox="0 0 %d %d" '
               'font-family="monospace" font-size="11">' % (width, height, width, height))
    out.append('<rect width="%d" height="%d" fill="#ffffff"/>' % (width, height))
    for j,t in enumerate(nmap.types):
        out.append('<text x="%d" y="%d" text-anchor="middle">%s</text>' % (_margin_x + _cell_w * j + _cell_w // 2, _margin_y - 12, t.value))

    for i,row in enumerate(nmap.scores):
        y = _margin_y + _cell_h * i
        out.append('<text x="%d" y="%d" text-anchor="end">layer %s</text>' % (_margin_x - 6, y + _cell_h // 2 + 4, index[i]))
        for j,score in enumerate(row):
            x = _margin_x + _cell_w * j
            out.append('<g transform="translate(%d,%d)"><title>layer %s %s: %s</title>'
                       '<rect width="%d" height="%d" fill="%s" stroke="#ffffff"/>'
                       '<text x="%d" y="%d" text-anchor="middle">%s</text></g>' % (
                           x, y, index[i], nmap.types[j].value, utils.fmt_score(score),
                           _cell_w, _cell_h, cell_color(score),
                           _cell_w // 2, _cell_h // 2 + 4, utils.fmt_score(score)))

    out.append('</svg>')
    return '\n'.join(out) + '\n'
