'''Pick LoRA target module types from NFN scores

Module scores are averaged per module type, types are ranked, and a placement
plan records which types get adapters. The 'plop' strategy takes the k types
with the lowest mean scores (the modules least aligned with the data);
'plop_inverse' takes the k highest. The fixed strategies 'attn' (q, k, v),
'mlp' (gate, up, down) and 'all' ignore the scores.

Module names resolve to types through module-types.yaml plus any user aliases.
You can extend the matching by editing that file.
'''

import enum
import json
import os
import yaml
from tabulate import tabulate
import nfnplop as p
from . import utils

_lookup_data = None

strategies = ['plop', 'plop_inverse', 'attn', 'mlp', 'all']


class ModuleType(enum.Enum):
    '''The seven linear module types of a Llama-style decoder layer, in canonical order
    '''

    QUERY = 'q_proj'
    KEY = 'k_proj'
    VALUE = 'v_proj'
    OUT_PROJ = 'o_proj'
    GATE_PROJ = 'gate_proj'
    UP_PROJ = 'up_proj'
    DOWN_PROJ = 'down_proj'

    @property
    def index(self):
        return _canonical.index(self)

    @property
    def label(self):
        return _labels[self]

    def __repr__(self):
        return 'ModuleType.{}'.format(self.label)

    @classmethod
    def parse(cls, x):
        '''Returns the ModuleType for a canonical name ('q_proj'), a label ('Query')
        or a ModuleType
        '''

        if isinstance(x, cls):
            return x

        s = str(x).strip()
        for t in cls:
            if s.lower() in (t.value, t.label.lower(), t.name.lower()):
                return t

        raise p.ModuleTypeError([s], 'unknown module type')

_canonical = list(ModuleType)
_labels = {
    ModuleType.QUERY: 'Query', ModuleType.KEY: 'Key', ModuleType.VALUE: 'Value',
    ModuleType.OUT_PROJ: 'OutProj', ModuleType.GATE_PROJ: 'GateProj',
    ModuleType.UP_PROJ: 'UpProj', ModuleType.DOWN_PROJ: 'DownProj',
}

# the printed score block lists down_proj before up_proj
_report_order = [ModuleType.QUERY, ModuleType.KEY, ModuleType.VALUE, ModuleType.OUT_PROJ,
                 ModuleType.GATE_PROJ, ModuleType.DOWN_PROJ, ModuleType.UP_PROJ]

fixed_strategies = {
    'attn': [ModuleType.QUERY, ModuleType.KEY, ModuleType.VALUE],
    'mlp': [ModuleType.GATE_PROJ, ModuleType.UP_PROJ, ModuleType.DOWN_PROJ],
    'all': list(_canonical),
}


class TypeScoreTable(dict):
    '''Mean NFN score and module count per module type

    A dict of ModuleType -> (mean score, module count) with a printable report.
    Iteration order is the order types were added; aggregate_by_type() adds them
    in canonical order.
    '''

    @classmethod
    def from_scores(cls, scores):
        '''Build a table from a mapping of type name to mean score (module count 1), e.g.
        the per-type block printed by a previous run

        Example:
            TypeScoreTable.from_scores({'q_proj': 2.58, 'k_proj': 2.63, 'v_proj': 0.97})
        '''

        t = cls()
        for k,v in scores.items():
            if type(v) in (tuple, list):
                t[ModuleType.parse(k)] = (float(v[0]), int(v[1]))
            else:
                t[ModuleType.parse(k)] = (float(v), 1)

        return t

    def means(self):
        return {t.value: v[0] for t,v in self.items()}

    def text_block(self):
        '''The per-type block printed by `nfnplop score`, always in q, k, v, o,
        gate, down, up order:

            ===========================
             NFN Scores by Module Type
            ===========================
             q_proj: 2.58
             ...
            ===========================
        '''

        bar = '=' * 27
        lines = [bar, ' NFN Scores by Module Type', bar]
        for t in sorted(self, key=_report_order.index):
            lines.append(' {}: {}'.format(t.value, utils.fmt_score(self[t][0])))

        lines.append(bar)
        return '\n'.join(lines) + '\n'

    def _rows(self):
        return [[t.value, t.label, v[0], v[1]] for t,v in self.items()]

    def __repr__(self):
        return tabulate(self._rows(), tablefmt='simple', headers=['type', 'label', 'mean score', 'modules'], floatfmt='.4f')

    def _repr_html_(self):
        return p.htmlTable(self._rows(), headers=['type', 'label', 'mean score', 'modules'], floatfmt='.4f')


class PlacementPlan():
    '''Where to put LoRA adapters

    Attributes:
        selected_types: ordered list of ModuleType

        k:              number of selected types

        rank:           LoRA rank r

        alpha:          LoRA alpha (2r unless overridden)

        strategy:       one of plop, plop_inverse, attn, mlp, all

        seed:           seed of the scoring run, if any

        dataset:        dataset tag of the scoring run, if any

        scores:         snapshot of the per-type mean scores, {type name: score}

        created_from:   digest of the activation bundle the scores came from
    '''

    def __init__(self, selected_types, rank, alpha, strategy, seed=None, dataset=None, scores=None, created_from=None):
        self.selected_types = [ModuleType.parse(t) for t in selected_types]
        self.k = len(self.selected_types)
        self.rank = int(rank)
        self.alpha = int(alpha)
        self.strategy = strategy
        self.seed = seed
        self.dataset = dataset
        self.scores = dict(scores or {})
        self.created_from = created_from

    @property
    def target_modules(self):
        return [t.value for t in self.selected_types]

    def __repr__(self):
        return 'PlacementPlan({}: {} r={} alpha={})'.format(self.strategy, self.target_modules, self.rank, self.alpha)

    def __eq__(self, other):
        return type(other) is PlacementPlan and self.to_dict() == other.to_dict()

    def to_dict(self):
        return {
            'strategy': self.strategy,
            'k': self.k,
            'rank': self.rank,
            'alpha': self.alpha,
            'target_modules': self.target_modules,
            'scores': self.scores,
            'seed': self.seed,
            'dataset': self.dataset,
            'created_from': self.created_from,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2) + '\n'

    @classmethod
    def from_dict(cls, d):
        for key in ('strategy', 'rank', 'alpha', 'target_modules'):
            if key not in d:
                raise p.ConfigError('plan is missing field {}'.format(key))

        plan = cls(d['target_modules'], d['rank'], d['alpha'], d['strategy'], seed=d.get('seed'),
                   dataset=d.get('dataset'), scores=d.get('scores'), created_from=d.get('created_from'))
        if 'k' in d and d['k'] != plan.k:
            raise p.ConfigError('plan k={} does not match {} target modules'.format(d['k'], plan.k))

        return plan

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def save(self, path):
        with open(path, 'w') as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path):
        with open(path, 'r') as fh:
            return cls.from_json(fh.read())


def resolve_type(name, aliases=None):
    '''Return the module type for a module name

    Arguments:
        name:       a module name, e.g. 'model.layers.7.self_attn.q_proj'

        aliases:    optional mapping of name pattern -> type name, tried before the
                    built-in patterns. Pass None to use nfnplop.aliases

    Returns:
        a ModuleType, or None if the name can't be resolved

    Example:
        resolve_type('model.layers.7.self_attn.q_proj')                  # ModuleType.Query
        resolve_type('blocks.0.attn.wqkv', {'wqkv': 'q_proj'})           # ModuleType.Query
    '''

    if aliases is None:
        aliases = p.aliases

    for pattern,t in aliases.items():
        if utils.qmatch(pattern, name):
            return ModuleType.parse(t)

    # the longest matching pattern wins, so 'DenseReluDense.wo' beats 'wo'
    best = None
    for pattern,t in _lookup():
        if utils.qmatch(pattern, name) and (best is None or len(pattern) > len(best[0])):
            best = (pattern, t)

    return best[1] if best else None

def aggregate_by_type(scores, aliases=None):
    '''Average module scores per module type

    Arguments:
        scores:     a list of NFNScore objects or dicts with at least module_name and score

        aliases:    optional name pattern -> type mapping, see resolve_type()

    Returns:
        a TypeScoreTable in canonical type order

    Example:
        print(aggregate_by_type(nfnplop.nfn.score_modules(weights, captured)))
    '''

    scores = list(scores)
    if len(scores) == 0:
        raise p.NumericError('no scores to aggregate')

    sums = {}
    unresolved = []
    for s in scores:
        if not isinstance(s, p.nfn.NFNScore):
            s = p.nfn.NFNScore.from_dict(s)

        t = ModuleType.parse(s.module_type) if s.module_type else resolve_type(s.module_name, aliases)
        if t is None:
            unresolved.append(s.module_name)
            continue

        sums.setdefault(t, []).append(s.score)

    if unresolved:
        raise p.ModuleTypeError(unresolved)

    table = TypeScoreTable()
    for t in _canonical:
        if t in sums:
            # sorted so the mean does not depend on input order
            v = sorted(sums[t])
            table[t] = (sum(v) / len(v), len(v))

    return table

def select_lowest(table, k=None):
    '''The k module types with the lowest mean scores, ascending

    Arguments:
        table:      a TypeScoreTable

        k:          number of types. Pass None to use the global default

    Returns:
        a list of ModuleType. Ties are broken by canonical type order

    Example:
        select_lowest(TypeScoreTable.from_scores({'q_proj': 2.58, 'k_proj': 2.63, 'v_proj': 0.97,
            'o_proj': 0.90, 'gate_proj': 1.40, 'down_proj': 1.05, 'up_proj': 1.11}), 3)
        # [OutProj, Value, DownProj]
    '''

    k = _check_k(table, k)
    return sorted(table, key=lambda t: (table[t][0], t.index))[:k]

def select_highest(table, k=None):
    '''The k module types with the highest mean scores, descending. Ties are broken by
    canonical type order
    '''

    k = _check_k(table, k)
    return sorted(table, key=lambda t: (-table[t][0], t.index))[:k]

def emit_plan(selection, r=None, strategy='plop', provenance=None, alpha=None, table=None):
    '''Build a PlacementPlan

    Arguments:
        selection:  list of module types (ignored for the fixed strategies attn, mlp, all)

        r:          LoRA rank. Pass None to use the global default

        strategy:   one of plop, plop_inverse, attn, mlp, all

        provenance: optional dict with seed, dataset and created_from

        alpha:      LoRA alpha. Pass None for 2r

        table:      optional TypeScoreTable recorded as the score snapshot

    Returns:
        a PlacementPlan

    Example:
        emit_plan([ModuleType.VALUE, ModuleType.OUT_PROJ, ModuleType.DOWN_PROJ], r=16).alpha   # 32
    '''

    if r is None:
        r = p.rank

    if int(r) != r or r <= 0:
        raise p.ConfigError('LoRA rank must be a positive integer, got {}'.format(r))

    if alpha is not None and alpha <= 0:
        raise p.ConfigError('LoRA alpha must be positive, got {}'.format(alpha))

    if strategy not in strategies:
        raise p.ConfigError('unknown strategy {}; expected one of {}'.format(strategy, ', '.join(strategies)))

    if strategy in fixed_strategies:
        selection = fixed_strategies[strategy]
    else:
        selection = [ModuleType.parse(t) for t in selection]
        if len(selection) == 0:
            raise p.ConfigError('a {} plan needs at least one module type'.format(strategy))

        if len(set(selection)) != len(selection):
            raise p.ConfigError('selected module types must be distinct')

    provenance = provenance or {}
    return PlacementPlan(selection, int(r), int(alpha) if alpha is not None else 2 * int(r), strategy,
                         seed=provenance.get('seed'), dataset=provenance.get('dataset'),
                         scores=table.means() if table is not None else None,
                         created_from=provenance.get('created_from'))

def make_plan(table, k=None, r=None, strategy='plop', provenance=None, alpha=None):
    '''Select module types from a score table and emit the plan in one call

    Example:
        plan = make_plan(aggregate_by_type(scores), k=3, r=16)
        plan.save('plan.json')
    '''

    if strategy == 'plop':
        selection = select_lowest(table, k)
    elif strategy == 'plop_inverse':
        selection = select_highest(table, k)
    else:
        selection = []

    return emit_plan(selection, r, strategy, provenance=provenance, alpha=alpha, table=table)

def lora_parameter_count(types, shapes, r, aliases=None):
    '''Number of trainable LoRA parameters when adapters of rank r go into every module
    of the given types. Each adapter adds r * (rows + cols) parameters

    Arguments:
        types:      list of module types

        shapes:     mapping of module name -> (rows, cols)

        r:          LoRA rank

        aliases:    optional name pattern -> type mapping, see resolve_type()
    '''

    types = set(ModuleType.parse(t) for t in types)
    total = 0
    for name,shape in shapes.items():
        if resolve_type(name, aliases) in types:
            total += r * (shape[0] + shape[1])

    return total

def matched_rank(types, shapes, reference_types, reference_rank, aliases=None):
    '''The rank for `types` whose LoRA parameter count is closest to a reference
    placement, e.g. to compare strategies at equal trainable parameters

    Example:
        # rank for attention-only adapters matching MLP adapters of rank 8
        matched_rank(fixed_strategies['attn'], shapes, fixed_strategies['mlp'], 8)
    '''

    target = lora_parameter_count(reference_types, shapes, reference_rank, aliases)
    per_rank = lora_parameter_count(types, shapes, 1, aliases)
    if per_rank == 0:
        raise p.ModuleTypeError([ModuleType.parse(t).value for t in types], 'no modules of these types in the weights')

    return max(1, int(round(target / per_rank)))

def info(table, k=None):
    '''Print a user report of a type score table with the PLoP ranking

    Returns:
        a printable Table
    '''

    low = select_lowest(table, len(table))
    keep = set(select_lowest(table, k if k is not None else min(p.k, len(table))))
    rows = []
    for i,t in enumerate(low):
        rows.append({'rank': i+1, 'type': t.value, 'label': t.label, 'mean score': table[t][0],
                     'modules': table[t][1], 'plop': '*' if t in keep else ''})

    return p.Table(rows, ['rank', 'type', 'label', 'mean score', 'modules', 'plop'])


def _check_k(table, k):
    if k is None:
        k = p.k

    if k < 1:
        raise p.ConfigError('k must be positive, got {}'.format(k))

    if k > len(table):
        raise p.ConfigError('k={} exceeds the {} module types present'.format(k, len(table)))

    return k

def _lookup():
    '''Loads module-types.yaml once and returns a list of (pattern, ModuleType)
    '''

    global _lookup_data

    if _lookup_data is None:
        with open(os.path.join(os.path.dirname(__file__), 'module-types.yaml'), 'r') as fh:
            data = yaml.safe_load(fh)

        _lookup_data = []
        for name,obj in data.items():
            t = ModuleType.parse(name)
            # convert ordinary arrays to objects - this keeps the yaml short
            if type(obj) is list:
                obj = {'patterns': obj}

            for pattern in obj.get('patterns', [name]):
                _lookup_data.append((pattern, t))

    return _lookup_data
