
'''nfnplop computes Normalized Feature Norm (NFN) alignment scores for the
linear modules of a neural network, picks LoRA target module types from them,
and ships a small lab for checking how feature norms grow during training.

Import the package; my preferred namespace is `plop`:

    import nfnplop as plop

    scores = plop.nfn.score_modules(weights, activations)
    table = plop.placement.aggregate_by_type(scores)
    print(table)
'''

import os
import warnings
import yaml
from tabulate import tabulate
from . import utils
from . import tensor
from . import nfn
from . import placement
from . import theory
from . import corpus
from . import transformer
from . import bundle
from . import nfnmap

from .__version__ import __version__

try:
    import pandas as pd
except ImportError:
    pd = None


# defaults: these can be changed at runtime with reasonable results
seed = 0
m = 4                    # baseline draws per input vector
k = 3                    # module types selected by a placement plan
rank = 16                # LoRA rank; alpha defaults to 2*rank
convention = 'squared'   # 'squared' (feature sqnorm ratio) or 'unsquared'
workers = 1              # thread pool size for per-module scoring
eta = 0.01               # lab learning-rate constant, applied as eta/n
delta = 0.25             # deviation exponent for the lab's n^-delta checks
gamma_form = 'recursion' # 'recursion' or 'statement'

# user-supplied module name patterns -> module type names, see placement.resolve_type
aliases = {}

_config_keys = {
    'seed': int, 'm': int, 'k': int, 'rank': int, 'convention': str, 'workers': int,
    'eta': float, 'delta': float, 'gamma_form': str,
}

class NFNError(Exception):
    '''Base class for all errors raised by nfnplop
    '''
    pass

class ShapeError(NFNError, ValueError):
    def __init__(self, msg, expected=None, got=None):
        super(ShapeError, self).__init__(msg)
        self.msg = msg
        self.expected = expected
        self.got = got

    def __str__(self):
        if self.expected is not None or self.got is not None:
            return 'ShapeError: {} (expected {}, got {})'.format(self.msg, self.expected, self.got)

        return 'ShapeError: {}'.format(self.msg)

class NumericError(NFNError, ValueError):
    '''Raised for NaN, non-finite or zero-norm inputs where a finite nonzero value is required
    '''
    pass

class ConfigError(NFNError, ValueError):
    pass

class ModuleTypeError(NFNError, ValueError):
    '''This error lists module names that could not be resolved, either to a module type
    or to a weight matrix. All offending names are collected before raising
    '''
    def __init__(self, names, msg='cannot resolve module type'):
        super(ModuleTypeError, self).__init__(msg)
        self.names = list(names)
        self.msg = msg

    def __str__(self):
        return 'ModuleTypeError: {}: {}'.format(self.msg, ', '.join(self.names))

class BundleError(NFNError):
    def __init__(self, path, msg, offset=None):
        super(BundleError, self).__init__(msg)
        self.path = path
        self.msg = msg
        self.offset = offset

    def __str__(self):
        if self.offset is not None:
            return 'BundleError: {} at byte {} ({})'.format(self.msg, self.offset, self.path)

        return 'BundleError: {} ({})'.format(self.msg, self.path)

class TrainingError(NFNError):
    def __init__(self, msg, step=None, loss=None):
        super(TrainingError, self).__init__(msg)
        self.msg = msg
        self.step = step
        self.loss = loss

    def __str__(self):
        return 'TrainingError: {} (step {}, loss {})'.format(self.msg, self.step, self.loss)


class Table():
    def __init__(self, rows, columns, title=None, footer=True):
        ''' can be initialized with any iterable of dicts or sequences
        '''

        self.rows = [r if type(r) is dict else dict(zip(columns, r)) for r in rows]
        self.columns = columns
        self.title = title
        self.footer = footer

    def __len__(self):
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def __repr__(self):

        rows = self.table()
        if len(rows) == 0:
            return ''

        s = tabulate(rows, tablefmt='simple', headers=self.columns, floatfmt='.4g')
        if self.title:
            s = '{}\n\n{}'.format(self.title, s)

        return s

    def _repr_html_(self):

        rows = self.table()
        if len(rows) == 0:
            return ''

        return htmlTable(rows, headers=self.columns, floatfmt='.4g')

    def table(self):

        rows = []
        if len(self.rows) == 0:
            return rows

        for row in self.rows:
            rows.append([row.get(k) for k in self.columns])

        if self.footer:
            rows.append(['', '{} rows'.format(len(rows))])

        return rows


def configure(**kwargs):
    '''Change runtime defaults

    Arguments:
        **kwargs:   any of seed, m, k, rank, convention, workers, eta, delta, gamma_form;
                    also aliases (a dict of module name patterns to module type names)

    Returns:
        a dict of the defaults now in effect

    Example:
        nfnplop.configure(seed=7, m=16)
    '''

    g = globals()
    for key,value in kwargs.items():
        if key == 'aliases':
            if type(value) is not dict:
                raise ConfigError('aliases must be a mapping of name pattern to module type')

            # resolve now so that a bad alias fails here instead of during scoring
            for v in value.values():
                placement.ModuleType.parse(v)

            g['aliases'] = dict(value)
            continue

        if key not in _config_keys:
            raise ConfigError('{} is not a configuration key'.format(key))

        try:
            value = _config_keys[key](value)
        except (TypeError, ValueError):
            raise ConfigError('{}: bad value {!r}'.format(key, value))

        if key in ('m', 'k', 'rank', 'workers') and value < 1:
            raise ConfigError('{} must be positive, got {}'.format(key, value))

        if key in ('eta',) and value <= 0:
            raise ConfigError('{} must be positive, got {}'.format(key, value))

        if key == 'delta' and not 0 < value < 0.5:
            raise ConfigError('delta must be in (0, 1/2), got {}'.format(value))

        if key == 'convention' and value not in ('squared', 'unsquared'):
            raise ConfigError('convention must be squared or unsquared, got {}'.format(value))

        if key == 'gamma_form' and value not in ('recursion', 'statement'):
            raise ConfigError('gamma_form must be recursion or statement, got {}'.format(value))

        g[key] = value

    return defaults()

def defaults():
    '''Returns the runtime defaults as a dict. Output files echo this so that results
    are self-describing
    '''

    g = globals()
    d = {key: g[key] for key in _config_keys}
    d['aliases'] = dict(aliases)
    return d

def load_config(path):
    '''Apply runtime defaults from a YAML file

    Arguments:
        path:       path to a YAML mapping. Keys are the same as for configure()

    Returns:
        a dict of the defaults now in effect

    Example:
        # settings.yaml
        #   seed: 3
        #   m: 8
        #   aliases:
        #     attention.wqkv: q_proj
        nfnplop.load_config('settings.yaml')
    '''

    if not os.path.exists(path):
        raise ConfigError('config file not found: {}'.format(path))

    with open(path, 'r') as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as err:
            raise ConfigError('{}: {}'.format(path, err))

    if data is None:
        return defaults()

    if type(data) is not dict:
        raise ConfigError('{}: expected a mapping at the top level'.format(path))

    return configure(**data)

def Series(data, key='module_name', value='score', name=None):
    '''Convert a list-like of dicts or score objects to a pandas Series object.

    Arguments:
        data:       an object array, generator, or function that returns a list-like.
                    Objects with a to_dict() method, such as NFNScore, are converted first

        key:        field for the Series index

        value:      field for the Series column values

        name:       Series column name. If None, same as value

    Returns:
        a pandas Series object

    Example:
        nfnplop.Series(nfnplop.nfn.score_modules(weights, captured))
    '''

    if pd is None:
        raise ModuleNotFoundError('you must install pandas to use this feature')

    if name is None:
        name = value

    if callable(data):
        data = data()

    rows = [row.to_dict() if hasattr(row, 'to_dict') else row for row in data]
    return pd.Series({row[key]: row[value] for row in rows}, name=name)

def htmlTable(*args, **kwargs):
    '''Generates an HTML table wrapped in a <div class="nfnplop"/> to allow users
       to customize the display if they wish. All arguments are passed to tabulate;
       you should not include the 'tablefmt=html' parameter
    '''

    return '<div class="nfnplop">' + tabulate(*args, tablefmt='html', **kwargs) + '</div>'

def warn(msg, category=UserWarning):
    '''Issue a warning attributed to the caller of the public function
    '''

    warnings.warn(msg, category, stacklevel=3)
