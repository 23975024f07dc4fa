
import json
import pytest
from hypothesis import given, settings, strategies as st
import nfnplop as plop
from nfnplop.nfn import NFNScore
from nfnplop.placement import (ModuleType, TypeScoreTable, PlacementPlan, resolve_type, aggregate_by_type,
                               select_lowest, select_highest, emit_plan, make_plan, lora_parameter_count, matched_rank)

type_names = [t.value for t in ModuleType]


def score(name, value):
    return NFNScore(name, value, 10, 1.0, 1.0, 4)

def test_canonical_order():
    assert type_names == ['q_proj', 'k_proj', 'v_proj', 'o_proj', 'gate_proj', 'up_proj', 'down_proj']
    assert ModuleType.parse('Query') is ModuleType.QUERY
    assert ModuleType.parse('down_proj') is ModuleType.DOWN_PROJ
    assert ModuleType.parse('out_proj') is ModuleType.OUT_PROJ
    assert ModuleType.OUT_PROJ.index == 3

    with pytest.raises(plop.ModuleTypeError):
        ModuleType.parse('lm_head')

@pytest.mark.parametrize('name, expected', [
    ('model.layers.7.self_attn.q_proj', 'q_proj'),
    ('model.layers.7.self_attn.q_proj.weight', 'q_proj'),
    ('layers.0.attn.v_proj', 'v_proj'),
    ('model.layers.0.mlp.gate_proj', 'gate_proj'),
    ('layers.3.attention.wo', 'o_proj'),
    ('encoder.block.0.layer.1.DenseReluDense.wo', 'down_proj'),
    ('transformer.h.2.mlp.c_fc', 'up_proj'),
])
def test_resolve_type(name, expected):
    assert resolve_type(name).value == expected

def test_resolve_type_unknown():
    assert resolve_type('model.embed_tokens') is None
    assert resolve_type('lm_head') is None

def test_aliases_take_precedence():
    assert resolve_type('blocks.0.attn.wqkv', {'wqkv': 'q_proj'}) is ModuleType.QUERY
    assert resolve_type('layers.3.attention.wo', {'wo': 'down_proj'}) is ModuleType.DOWN_PROJ

    plop.configure(aliases={'*.fused_in': 'up_proj'})
    assert resolve_type('layers.1.mlp.fused_in') is ModuleType.UP_PROJ

def test_bad_alias_fails_at_configure():
    with pytest.raises(plop.ModuleTypeError):
        plop.configure(aliases={'wqkv': 'qkv_proj'})

def test_reference_fixture(reference_table):
    assert select_lowest(reference_table, 3) == [ModuleType.OUT_PROJ, ModuleType.VALUE, ModuleType.DOWN_PROJ]
    assert select_highest(reference_table, 3) == [ModuleType.KEY, ModuleType.QUERY, ModuleType.GATE_PROJ]

    plan = make_plan(reference_table, k=3, r=16)
    assert plan.target_modules == ['o_proj', 'v_proj', 'down_proj']
    assert plan.alpha == 32
    assert plan.scores['q_proj'] == 2.58

def test_text_block(reference_table):
    lines = reference_table.text_block().splitlines()
    assert lines[0] == '=' * 27
    assert lines[1] == ' NFN Scores by Module Type'
    assert lines[3] == ' q_proj: 2.58'
    assert lines[-2] == ' up_proj: 1.11'
    assert lines[-1] == '=' * 27

def test_text_block_order_ignores_table_order(reference_table):
    scores = [score('layers.0.{}'.format(t.value), reference_table[t][0]) for t in reversed(list(ModuleType))]
    table = aggregate_by_type(scores)
    assert list(table)[-2:] == [ModuleType.UP_PROJ, ModuleType.DOWN_PROJ]

    names = [line.split(':')[0].strip() for line in table.text_block().splitlines()[3:-1]]
    assert names == ['q_proj', 'k_proj', 'v_proj', 'o_proj', 'gate_proj', 'down_proj', 'up_proj']
    assert table.text_block() == reference_table.text_block()

def test_html_repr(reference_table):
    html = reference_table._repr_html_()
    assert html.startswith('<div class="nfnplop"><table>')
    assert html.count('<tr>') == 8
    assert 'v_proj' in html and '0.9700' in html

def test_ties_follow_canonical_order():
    table = TypeScoreTable.from_scores({'down_proj': 1.0, 'v_proj': 1.0, 'q_proj': 1.0, 'up_proj': 2.0})
    assert select_lowest(table, 2) == [ModuleType.QUERY, ModuleType.VALUE]
    assert select_highest(table, 2) == [ModuleType.UP_PROJ, ModuleType.QUERY]

@given(st.lists(st.floats(min_value=0, max_value=10, allow_nan=False), min_size=7, max_size=7), st.integers(min_value=1, max_value=7))
@settings(max_examples=50)
def test_selection_properties(values, k):
    table = TypeScoreTable.from_scores(dict(zip(type_names, values)))
    low = select_lowest(table, k)
    high = select_highest(table, k)
    assert len(low) == len(set(low)) == k
    assert len(high) == k

    # nothing left out scores below anything selected
    worst = max(table[t][0] for t in low)
    assert all(table[t][0] >= worst for t in table if t not in low)

    if k == 7:
        assert set(low) == set(high) == set(ModuleType)

def test_k_out_of_range(reference_table):
    with pytest.raises(plop.ConfigError):
        select_lowest(reference_table, 0)

    with pytest.raises(plop.ConfigError):
        select_lowest(reference_table, 8)

def test_aggregate_by_type():
    scores = [
        score('layers.0.attn.q_proj', 2.0), score('layers.1.attn.q_proj', 4.0),
        score('layers.0.mlp.down_proj', 1.0), score('layers.0.attn.v_proj', 0.5),
    ]
    table = aggregate_by_type(scores)
    assert list(table) == [ModuleType.QUERY, ModuleType.VALUE, ModuleType.DOWN_PROJ]
    assert table[ModuleType.QUERY] == (3.0, 2)
    assert table.means() == {'q_proj': 3.0, 'v_proj': 0.5, 'down_proj': 1.0}

def test_aggregate_is_order_independent():
    scores = [score('layers.{}.attn.k_proj'.format(i), 0.1 * i + 1e-9 * i * i) for i in range(16)]
    assert aggregate_by_type(scores) == aggregate_by_type(reversed(scores))

def test_aggregate_collects_unresolved_names():
    scores = [score('layers.0.attn.q_proj', 1.0), score('lm_head', 1.0), score('embed', 1.0)]
    with pytest.raises(plop.ModuleTypeError) as err:
        aggregate_by_type(scores)

    assert err.value.names == ['lm_head', 'embed']

def test_aggregate_empty():
    with pytest.raises(plop.NumericError):
        aggregate_by_type([])

def test_aggregate_accepts_score_records():
    records = [{'module_name': 'layers.0.attn.q_proj', 'score': 2.0}, {'module_name': 'layers.1.attn.q_proj', 'score': 4.0},
               {'module_name': 'layers.0.mlp.down_proj', 'score': 1.0, 'n_samples': 12}]
    table = aggregate_by_type(records)
    assert table.means() == {'q_proj': 3.0, 'down_proj': 1.0}
    assert table[ModuleType.QUERY] == (3.0, 2)

    s = NFNScore.from_dict(records[2])
    assert (s.n_samples, s.m_baseline_draws, s.convention) == (12, 0, 'squared')

@pytest.mark.parametrize('record', [{'score': 1.0}, {'module_name': 'layers.0.attn.q_proj'},
                                    {'module_name': 'layers.0.attn.q_proj', 'score': [1.0]}, 'layers.0.attn.q_proj'])
def test_aggregate_rejects_bad_records(record):
    with pytest.raises(plop.ConfigError):
        aggregate_by_type([record])

def test_fixed_strategies(reference_table):
    assert make_plan(reference_table, strategy='attn', r=8).target_modules == ['q_proj', 'k_proj', 'v_proj']
    assert make_plan(reference_table, strategy='mlp', r=8).target_modules == ['gate_proj', 'up_proj', 'down_proj']
    assert make_plan(reference_table, strategy='all', r=8).k == 7

def test_emit_plan_validation():
    with pytest.raises(plop.ConfigError):
        emit_plan([ModuleType.VALUE], r=0)

    with pytest.raises(plop.ConfigError):
        emit_plan([ModuleType.VALUE], r=4, alpha=-1)

    with pytest.raises(plop.ConfigError):
        emit_plan([ModuleType.VALUE], r=4, strategy='random')

    with pytest.raises(plop.ConfigError):
        emit_plan([], r=4)

    with pytest.raises(plop.ConfigError):
        emit_plan([ModuleType.VALUE, ModuleType.VALUE], r=4)

def test_emit_plan_defaults():
    plop.configure(rank=8)
    plan = emit_plan(['v_proj'], provenance={'seed': 3, 'dataset': 'arithmetic', 'created_from': 'sha256:00'})
    assert (plan.rank, plan.alpha) == (8, 16)
    assert plan.seed == 3
    assert plan.created_from == 'sha256:00'
    assert emit_plan(['v_proj'], r=8, alpha=7).alpha == 7

def test_plan_json_round_trip(reference_table, tmp_path):
    plan = make_plan(reference_table, k=3, r=16, provenance={'seed': 0, 'dataset': 'math'})
    path = str(tmp_path / 'plan.json')
    plan.save(path)
    assert PlacementPlan.load(path) == plan

    d = json.loads(plan.to_json())
    assert d['target_modules'] == ['o_proj', 'v_proj', 'down_proj']
    assert d['k'] == 3

def test_plan_from_dict_validation():
    with pytest.raises(plop.ConfigError):
        PlacementPlan.from_dict({'strategy': 'plop', 'rank': 4, 'alpha': 8})

    with pytest.raises(plop.ConfigError):
        PlacementPlan.from_dict({'strategy': 'plop', 'rank': 4, 'alpha': 8, 'k': 2, 'target_modules': ['v_proj']})

def shapes(n_layers=2, d=64, d_mlp=172):
    s = {}
    for i in range(n_layers):
        for t in ('q', 'k', 'v', 'o'):
            s['layers.{}.attn.{}_proj'.format(i, t)] = (d, d)

        s['layers.{}.mlp.gate_proj'.format(i)] = (d_mlp, d)
        s['layers.{}.mlp.up_proj'.format(i)] = (d_mlp, d)
        s['layers.{}.mlp.down_proj'.format(i)] = (d, d_mlp)

    return s

def test_lora_parameter_count():
    assert lora_parameter_count(['q_proj'], shapes(), 4) == 2 * 4 * (64 + 64)
    assert lora_parameter_count(['gate_proj', 'down_proj'], shapes(), 1) == 4 * (172 + 64)

def test_matched_rank():
    attn = plop.placement.fixed_strategies['attn']
    mlp = plop.placement.fixed_strategies['mlp']
    r = matched_rank(attn, shapes(), mlp, 8)
    # 3 * 236 * 8 / (3 * 128) = 14.75
    assert r == 15

    with pytest.raises(plop.ModuleTypeError):
        matched_rank(['q_proj'], {'lm_head': (4, 4)}, ['q_proj'], 4)

def test_info(reference_table):
    t = plop.placement.info(reference_table, k=3)
    rows = list(t)
    assert [r['type'] for r in rows[:3]] == ['o_proj', 'v_proj', 'down_proj']
    assert [r['plop'] for r in rows] == ['*', '*', '*', '', '', '', '']
    assert 'o_proj' in repr(t)
