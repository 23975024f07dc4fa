
import numpy as np
import pytest
import nfnplop as plop
from nfnplop.nfn import NFNScore
from nfnplop.placement import ModuleType
from nfnplop.nfnmap import NFNMap, export_map, read_map_csv, cell_color

try:
    import pandas as pd
except ImportError:
    pd = None


def grid_scores(n_layers=2):
    scores = []
    for i in range(n_layers):
        for j,t in enumerate(ModuleType):
            scores.append(NFNScore('layers.{}.x.{}'.format(i, t.value), 1.0 + 0.5 * j + 0.25 * i, 8, 1.0, 1.0, 4))

    return scores

def test_from_scores():
    nmap = NFNMap.from_scores(grid_scores(), {'seed': 0})
    assert nmap.scores.shape == (2, 7)
    assert nmap.types == list(ModuleType)
    assert list(nmap.column('k_proj')) == [1.5, 1.75]
    assert nmap.metadata == {'seed': 0, 'layer_index': [0, 1]}

def test_from_scores_partial_types():
    scores = [s for s in grid_scores() if s.module_name.endswith(('v_proj', 'o_proj'))]
    nmap = NFNMap.from_scores(scores)
    assert nmap.types == [ModuleType.VALUE, ModuleType.OUT_PROJ]

def test_from_scores_errors():
    with pytest.raises(plop.ModuleTypeError):
        NFNMap.from_scores([NFNScore('lm_head', 1.0, 1, 1.0, 1.0, 1)])

    scores = grid_scores()[:-1]
    with pytest.raises(plop.ModuleTypeError, match='empty cells'):
        NFNMap.from_scores(scores)

def test_map_validation():
    with pytest.raises(plop.ShapeError):
        NFNMap(np.ones((2, 3)))

    with pytest.raises(plop.NumericError):
        NFNMap(np.full((1, 7), np.nan))

@pytest.mark.parametrize('bad', [0.0, -0.5])
def test_map_rejects_nonpositive_scores(bad, tmp_path):
    grid = np.ones((2, 7))
    grid[1, 3] = bad
    with pytest.raises(plop.NumericError, match='positive'):
        NFNMap(grid)

    path = str(tmp_path / 'nfn-map.csv')
    with open(path, 'w') as fh:
        fh.write('layer,q_proj,v_proj\n0,1.0,2.0\n1,1.5,{}\n'.format(bad))

    with pytest.raises(plop.NumericError):
        read_map_csv(path)

def test_html_repr():
    html = NFNMap.from_scores(grid_scores())._repr_html_()
    assert html.startswith('<div class="nfnplop">')
    assert html.count('<tr>') == 3

def test_type_table():
    table = NFNMap.from_scores(grid_scores()).type_table()
    assert table[ModuleType.QUERY] == (1.125, 2)
    assert table.text_block().splitlines()[3] == ' q_proj: 1.12'

def test_csv_round_trip(tmp_path):
    nmap = NFNMap.from_scores(grid_scores(3))
    path = str(tmp_path / 'nfn-map.csv')
    text = export_map(nmap, 'csv', path)
    assert text.splitlines()[0] == 'layer,q_proj,k_proj,v_proj,o_proj,gate_proj,up_proj,down_proj'
    assert text.splitlines()[1].startswith('0,1.0,1.5,')
    assert read_map_csv(path) == nmap

def test_bad_csv(tmp_path):
    path = tmp_path / 'x.csv'
    path.write_text('a,b\n1,2\n')
    with pytest.raises(plop.ConfigError):
        read_map_csv(str(path))

    path.write_text('layer,q_proj\nzero,1.0\n')
    with pytest.raises(plop.ConfigError):
        read_map_csv(str(path))

def test_svg():
    nmap = NFNMap(np.array([[0.4, 1.0, 5.0]]), ['q_proj', 'k_proj', 'v_proj'])
    svg = export_map(nmap, 'svg')
    assert svg.startswith('<svg xmlns="http://www.w3.org/2000/svg"')
    assert svg.rstrip().endswith('</svg>')
    assert svg.count('<rect width="72"') == 3
    assert '#2166ac' in svg and '#f7f7f7' in svg and '#b2182b' in svg
    assert export_map(nmap, 'svg') == svg

def test_text_export():
    nmap = NFNMap.from_scores(grid_scores())
    assert export_map(nmap, 'text') == nmap.type_table().text_block()

    with pytest.raises(plop.ConfigError):
        export_map(nmap, 'png')

@pytest.mark.parametrize('score, color', [
    (1.0, '#f7f7f7'),
    (0.5, '#2166ac'),
    (0.1, '#2166ac'),
    (3.0, '#b2182b'),
    (10.0, '#b2182b'),
])
def test_cell_color(score, color):
    assert cell_color(score) == color

def test_cell_color_is_monotone():
    reds = [int(cell_color(s)[3:5], 16) for s in np.linspace(1.0, 3.0, 9)]
    assert reds == sorted(reds, reverse=True)

@pytest.mark.skipif(pd is None, reason='pandas is not installed')
def test_dataframe():
    df = plop.nfnmap.DataFrame(NFNMap.from_scores(grid_scores()))
    assert list(df.columns)[:2] == ['q_proj', 'k_proj']
    assert df.index.name == 'layer'
    assert df.loc[1, 'q_proj'] == 1.25
