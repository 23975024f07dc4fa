'''Command-line interface

    nfnplop score    --weights W --activations A     per-module scores + per-type block
    nfnplop plan     --scores S --k 3 --rank 16      LoRA placement plan
    nfnplop map      --weights W --activations A     NFN map as CSV, SVG and text
    nfnplop lab      theorem1|signconst|baseline|fig3
    nfnplop capture  --task arithmetic               toy transformer weights + activations
    nfnplop selftest

Exit codes: 0 success, 1 validation error, 2 acceptance failure.
'''

import argparse
import json
import logging
import os
import sys
import numpy as np
import nfnplop as p
from . import bundle
from . import corpus
from . import nfn
from . import nfnmap
from . import placement
from . import selftest
from . import tensor
from . import theory
from . import transformer
from . import utils

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_FAILED = 2


def main(argv=None):
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        # argparse exits 2 on usage errors; 2 is reserved for failed checks
        return EXIT_INVALID if err.code else EXIT_OK

    logging.basicConfig(level={0: logging.WARNING, 1: logging.INFO}.get(args.verbose, logging.DEBUG),
                        format='%(levelname)s %(name)s: %(message)s')

    try:
        if args.config:
            p.load_config(args.config)

        _apply_flags(args)
        os.makedirs(args.output_dir, exist_ok=True)
        return args.func(args)
    except p.NFNError as err:
        print(err, file=sys.stderr)
        return EXIT_INVALID
    except OSError as err:
        print('{}: {}'.format(type(err).__name__, err), file=sys.stderr)
        return EXIT_INVALID

def cmd_score(args):
    '''Score every module in the activations against its weight; write nfn-scores.json
    and nfn-types.txt
    '''

    weights, activations, digest = _load_inputs(args)
    scores = nfn.score_modules(weights, activations, rng=tensor.Rng(p.seed))
    table = placement.aggregate_by_type(scores)

    doc = {
        'defaults': _echo(),
        'dataset': args.dataset,
        'created_from': digest,
        'modules': [s.to_dict() for s in scores],
        'types': {t.value: {'mean': v[0], 'modules': v[1]} for t,v in table.items()},
    }
    _write(args, 'nfn-scores.json', json.dumps(doc, indent=2, sort_keys=True) + '\n')
    block = table.text_block()
    _write(args, 'nfn-types.txt', block)

    if args.aggregation == 'module':
        rows = [{'module': s.module_name, 'type': s.module_type or getattr(placement.resolve_type(s.module_name), 'value', None),
                 'score': s.score, 'samples': s.n_samples, 'skipped': s.n_skipped} for s in scores]
        print(p.Table(sorted(rows, key=lambda r: (r['score'], r['module'])), ['module', 'type', 'score', 'samples', 'skipped']))
    else:
        print(block, end='')

    return EXIT_OK

def cmd_plan(args):
    '''Select module types from a scores file and write plan.json
    '''

    with open(args.scores, 'r') as fh:
        try:
            doc = json.load(fh)
        except ValueError as err:
            raise p.ConfigError('{}: {}'.format(args.scores, err))

    table = _score_table(doc)
    provenance = {'seed': doc.get('defaults', {}).get('seed', p.seed), 'dataset': doc.get('dataset'), 'created_from': doc.get('created_from')}
    plan = placement.make_plan(table, args.k, p.rank, args.strategy, provenance, args.alpha)

    if args.match_rank:
        if not args.weights:
            raise p.ConfigError('--match-rank requires --weights')

        strategy, _, r = args.match_rank.partition(':')
        try:
            r = int(r)
        except ValueError:
            raise p.ConfigError('--match-rank expects STRATEGY:R, got {}'.format(args.match_rank))

        ref = placement.make_plan(table, args.k, r, strategy)
        shapes = {utils.qname(k): v.shape for k,v in bundle.load_tensors(args.weights).items() if np.ndim(v) == 2}
        rank = placement.matched_rank(plan.selected_types, shapes, ref.selected_types, r)
        plan = placement.make_plan(table, args.k, rank, args.strategy, provenance, args.alpha)
        logger.info('matched rank %d against %s r=%d', rank, strategy, r)

    _write(args, 'plan.json', plan.to_json())
    print(placement.info(table, plan.k if args.strategy == 'plop' else None))
    print('\n{}: target_modules={} r={} alpha={}'.format(plan.strategy, plan.target_modules, plan.rank, plan.alpha))
    return EXIT_OK

def cmd_map(args):
    '''Score modules and write the NFN map in the requested formats
    '''

    weights, activations, digest = _load_inputs(args)
    scores = nfn.score_modules(weights, activations, rng=tensor.Rng(p.seed))
    meta = {'seed': p.seed, 'dataset': args.dataset, 'm': p.m, 'convention': p.convention, 'created_from': digest}
    nmap = nfnmap.NFNMap.from_scores(scores, meta)
    ext = {'csv': 'csv', 'svg': 'svg', 'text': 'txt'}
    for fmt in args.format:
        nfnmap.export_map(nmap, fmt, os.path.join(args.output_dir, 'nfn-map.' + ext[fmt]))

    print(nmap)
    return EXIT_OK

def cmd_lab(args):
    '''Run a theory experiment; write trajectory CSVs and a summary JSON
    '''

    if args.experiment == 'fig3':
        trajs = theory.run_fig3_experiment(p.seed, n=args.n or 100, d=args.d or 100, steps=args.steps or 300,
                                           omega=args.omega, optimizer=args.optimizer)
        for traj in trajs:
            traj.to_csv(os.path.join(args.output_dir, 'fig3-layer{}.csv'.format(traj.meta['layer'])))

        summary = theory.fig3_summary(trajs)
    else:
        config = theory.LinearNetConfig(n=args.n or 1024, d=args.d or 64, seed=p.seed)
        window = None
        if args.steps is None:
            window = theory.estimate_window(config, args.window_trials)
            config = config.replace(steps=max(window // 2, 1))
        else:
            config = config.replace(steps=args.steps)

        summary = _lab_single_layer(args, config)
        summary['window'] = window

    summary['defaults'] = _echo()
    summary.save(os.path.join(args.output_dir, 'lab-{}.json'.format(args.experiment)))
    print(summary)
    return EXIT_OK if summary.passed else EXIT_FAILED

def cmd_capture(args):
    '''Build (and optionally train) a toy transformer, run one forward pass and write
    weights and activations bundles
    '''

    config = transformer.TransformerConfig(args.n_layers, args.n_heads, args.d_model, args.d_mlp,
                                           corpus.vocab_size, args.max_seq_len, p.seed)
    model = transformer.build_model(config)
    if args.train_steps:
        model = transformer.train_toy(model, args.train_task or args.task, steps=args.train_steps, seed=p.seed)

    if args.tokens:
        tokens, mask = corpus.load_tokens(args.tokens)
        dataset = os.path.basename(args.tokens)
    else:
        tokens, mask = corpus.synthetic_corpus(args.task, args.batch, args.seq_len, p.seed), None
        dataset = args.task

    _, captured = transformer.forward_with_capture(model, tokens, mask)
    meta = {'model': config.to_dict(), 'dataset': dataset, 'train_steps': args.train_steps}
    bundle.write_bundle(model.weights(), os.path.join(args.output_dir, 'weights'), meta)
    path = bundle.write_bundle(captured, os.path.join(args.output_dir, 'activations'), meta)
    print('captured {} modules x {} vectors -> {}'.format(len(captured), tokens.size, path))
    return EXIT_OK

def cmd_selftest(args):
    '''Run the acceptance checks; exit 2 if any fails
    '''

    report = selftest.run(args.checks)
    _write(args, 'selftest.txt', repr(report) + '\n')
    print(report)
    return EXIT_OK if report.passed else EXIT_FAILED


def _lab_single_layer(args, config):
    delta = p.delta
    n = config.n
    if args.experiment == 'signconst':
        s = theory.run_sign_constancy(config, args.trials, delta, report=True)
        f = s['constancy_fraction']
        s.check('constancy_fraction', f, '>= 0.95', f >= 0.95)
        return s

    if args.experiment == 'theorem1':
        traj, sup = theory.run_theorem1(config, delta)
        traj.to_csv(os.path.join(args.output_dir, 'theorem1.csv'))
        _, r2 = theory.quadratic_fit(traj['step'], traj['gamma'])
        s = theory.LabSummary(experiment='theorem1', config=config.to_dict(), delta=delta, gamma_form=p.gamma_form)
        s['sup_deviation'] = sup
        s['sup_deviation_recursion'] = traj.meta['sup_deviation_recursion']
        s['sup_deviation_statement'] = traj.meta['sup_deviation_statement']
        s['C_hat'] = traj.meta['C_hat']
        s['beta'] = traj.meta['beta']
        s['step_bound'] = traj.meta['step_bound']
        s['warnings'] = traj.meta['warnings']
        s.check('quadratic_fit_r2', r2, '>= 0.99', r2 >= 0.99)
        s.check('sign_constant', int(np.all(traj['chi'][:-1] == traj['chi'][0])), '== 1', np.all(traj['chi'][:-1] == traj['chi'][0]))
        return s

    traj = theory.run_baseline_flatness(config)
    traj.to_csv(os.path.join(args.output_dir, 'baseline.csv'))
    drift, growth = traj.meta['max_drift'], traj.meta['growth']
    limit = 10 * n ** -0.5 * traj['gamma_baseline'][0]
    s = theory.LabSummary(experiment='baseline', config=config.to_dict())
    s['max_drift'] = drift
    s['growth'] = growth
    s.check('baseline_drift', drift, '<= {:.6g}'.format(limit), drift <= limit)
    s.check('growth_over_drift', growth / drift if drift > 0 else float('inf'), '>= 10', growth >= 10 * drift)
    return s

def _load_inputs(args):
    '''Returns (weights, activations, digest) with weight names matched to activation names
    '''

    if not args.weights or not args.activations:
        raise p.ConfigError('--weights and --activations are required')

    raw = bundle.load_tensors(args.weights)
    weights = {}
    for name,W in raw.items():
        if np.ndim(W) == 2:
            weights[utils.qname(name)] = W

    acts = bundle.read_bundle(args.activations)
    activations = {}
    for name,batch in acts.activations().items():
        key = utils.qname(name)
        if batch.layer is None:
            batch.layer = utils.layer_index(name)

        batch.module_name = key
        activations[key] = batch

    return weights, activations, acts.digest

def _score_table(doc):
    '''TypeScoreTable from a scores file: `nfnplop score` output, a
    {'modules': [{module_name, score}, ...]} list or a flat {type: score} mapping
    '''

    if type(doc) is not dict:
        raise p.ConfigError('a scores file must hold a JSON object, got {}'.format(type(doc).__name__))

    if 'types' in doc:
        return placement.TypeScoreTable.from_scores({k: (v['mean'], v['modules']) for k,v in doc['types'].items()})

    if 'modules' in doc:
        if type(doc['modules']) is not list:
            raise p.ConfigError('"modules" in a scores file must be a list of score records')

        return placement.aggregate_by_type(doc['modules'])

    return placement.TypeScoreTable.from_scores({k: v for k,v in doc.items() if not isinstance(v, dict)})

def _write(args, name, text):
    with open(os.path.join(args.output_dir, name), 'w') as fh:
        fh.write(text)

def _apply_flags(args):
    settings = {}
    for key in ('seed', 'm', 'k', 'rank', 'convention', 'workers', 'eta', 'delta', 'gamma_form'):
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value

    p.configure(**settings)

def _echo():
    '''Defaults recorded in output files; the thread count does not change results
    '''

    d = p.defaults()
    del d['workers']
    return d

def _parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('-v', '--verbose', action='count', default=0, help='log progress (-vv for debug output)')
    common.add_argument('--config', metavar='FILE', help='YAML file of defaults and module-name aliases')
    common.add_argument('--seed', type=int, help='random seed (default {})'.format(p.seed))
    common.add_argument('--output_dir', '--output-dir', default='results', help='output directory (default results)')

    scoring = argparse.ArgumentParser(add_help=False)
    scoring.add_argument('--weights', metavar='PATH', help='weights bundle manifest or .safetensors file')
    scoring.add_argument('--activations', metavar='PATH', help='activations bundle manifest')
    scoring.add_argument('--m', type=int, help='baseline draws per input vector (default {})'.format(p.m))
    scoring.add_argument('--workers', type=int, help='scoring threads (default {})'.format(p.workers))
    scoring.add_argument('--convention', choices=['squared', 'unsquared'], help='score convention (default {})'.format(p.convention))
    scoring.add_argument('--dataset', help='dataset tag recorded in the outputs')

    parser = argparse.ArgumentParser(prog='nfnplop', description='NFN scores and LoRA placement')
    parser.set_defaults(func=None)
    sub = parser.add_subparsers(dest='command', required=True)

    cmd = sub.add_parser('score', parents=[common, scoring], help='score modules and aggregate by type')
    cmd.add_argument('--aggregation', choices=['module', 'type'], default='type', help='print per-module or per-type scores (default type)')
    cmd.set_defaults(func=cmd_score)

    cmd = sub.add_parser('plan', parents=[common], help='write a LoRA placement plan')
    cmd.add_argument('--scores', required=True, metavar='FILE', help='nfn-scores.json, or a JSON mapping of type to score')
    cmd.add_argument('--k', type=int, help='module types to select (default {})'.format(p.k))
    cmd.add_argument('-r', '--rank', type=int, help='LoRA rank (default {})'.format(p.rank))
    cmd.add_argument('--alpha', type=int, help='LoRA alpha (default 2 x rank)')
    cmd.add_argument('--strategy', choices=placement.strategies, default='plop', help='selection strategy (default plop)')
    cmd.add_argument('--match-rank', metavar='STRATEGY:R', help='pick the rank whose parameter count matches STRATEGY at rank R')
    cmd.add_argument('--weights', metavar='PATH', help='weights, for --match-rank')
    cmd.set_defaults(func=cmd_plan)

    cmd = sub.add_parser('map', parents=[common, scoring], help='write the NFN map')
    cmd.add_argument('--format', nargs='+', choices=nfnmap.formats, default=list(nfnmap.formats), help='output formats (default all)')
    cmd.set_defaults(func=cmd_map)

    cmd = sub.add_parser('lab', parents=[common], help='feature-norm growth experiments')
    cmd.add_argument('experiment', choices=['theorem1', 'signconst', 'baseline', 'fig3'])
    cmd.add_argument('--n', type=int, help='width (default 1024; 100 for fig3)')
    cmd.add_argument('--d', type=int, help='input dimension (default 64; 100 for fig3)')
    cmd.add_argument('--eta', type=float, help='learning-rate constant (default {})'.format(p.eta))
    cmd.add_argument('--steps', type=int, help='training steps (default half the estimated constant-sign window; 300 for fig3)')
    cmd.add_argument('--trials', type=int, default=100, help='seeded trials for signconst (default 100)')
    cmd.add_argument('--window-trials', type=int, default=100, help='trials for the window estimate (default 100)')
    cmd.add_argument('--delta', type=float, help='deviation exponent (default {})'.format(p.delta))
    cmd.add_argument('--gamma-form', dest='gamma_form', choices=['recursion', 'statement'], help='predicted growth form (default {})'.format(p.gamma_form))
    cmd.add_argument('--omega', choices=['sqrt', 'linear'], default='sqrt', help='fig3 target weight scale: d^-1/2 or d^-1 (default sqrt)')
    cmd.add_argument('--optimizer', choices=['adam', 'signsgd'], default='adam', help='fig3 optimizer (default adam)')
    cmd.set_defaults(func=cmd_lab)

    cmd = sub.add_parser('capture', parents=[common], help='capture toy transformer activations')
    cmd.add_argument('--tokens', metavar='FILE', help='token file (.json list of lists, or one sequence of ints per line)')
    cmd.add_argument('--task', choices=corpus.tasks, default='arithmetic', help='synthetic corpus when --tokens is not given (default arithmetic)')
    cmd.add_argument('--batch', type=int, default=8, help='sequences (default 8)')
    cmd.add_argument('--seq-len', type=int, default=32, help='tokens per sequence (default 32)')
    cmd.add_argument('--n-layers', type=int, default=2, help='default 2')
    cmd.add_argument('--n-heads', type=int, default=4, help='default 4')
    cmd.add_argument('--d-model', type=int, default=64, help='default 64')
    cmd.add_argument('--d-mlp', type=int, default=172, help='default 172')
    cmd.add_argument('--max-seq-len', type=int, default=64, help='default 64')
    cmd.add_argument('--train-steps', type=int, default=0, help='Adam steps before capture (default 0)')
    cmd.add_argument('--train-task', choices=corpus.tasks, help='training corpus (default: --task)')
    cmd.set_defaults(func=cmd_capture)

    cmd = sub.add_parser('selftest', parents=[common], help='run the acceptance checks')
    cmd.add_argument('--checks', type=int, nargs='+', metavar='N', help='run only these checks (default all)')
    cmd.set_defaults(func=cmd_selftest)

    return parser
