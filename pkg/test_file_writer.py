import sys
import os
sys.path.insert(0, os.path.abspath(os.path.dirname(__file__)))

import asyncio

import pandas as pd
from PIL import Image

from file_writer import FileWriter, image_to_ppm, table_to_csv


def test_write_files_creates_nested_directories(tmp_path):
    writer = FileWriter(str(tmp_path))
    files = {
        'summary.csv': table_to_csv(pd.DataFrame({'policy': ['mcts'], 'n_ok': [3]})),
        os.path.join('mcts', 'trace_0.csv'): 'step,t\n0,1.5\n',
        'truth.ppm': image_to_ppm(Image.new('RGB', (2, 1), (10, 20, 30))),
    }
    written = asyncio.run(writer.write_files(files, str(tmp_path / 'B')))
    assert len(written) == 3
    assert (tmp_path / 'B' / 'summary.csv').read_text() == 'policy,n_ok\nmcts,3\n'
    assert (tmp_path / 'B' / 'truth.ppm').read_bytes().endswith(bytes([10, 20, 30, 10, 20, 30]))


def test_run_log_and_listing(tmp_path):
    writer = FileWriter(str(tmp_path))
    assert writer.list_runs() == []
    assert asyncio.run(writer.save_run_log(str(tmp_path / 'A'), {'seed': 1}))
    runs = writer.list_runs()
    assert [r['run_name'] for r in runs] == ['A']
    assert runs[0]['files'] == ['run_log.json']
    assert writer.get_run_info(str(tmp_path / 'missing')) == {}


def test_unwritable_target_is_reported_not_raised(tmp_path):
    blocker = tmp_path / 'blocker'
    blocker.write_text('')
    writer = FileWriter(str(tmp_path))
    assert not asyncio.run(writer.write_file(str(blocker / 'child.csv'), 'x'))
