#!/usr/bin/env python3
"""
Generate the experiments README from results/data.json
"""

import json
from datetime import datetime
from pathlib import Path

import numpy as np

COLUMNS = ['map_full', 'map_rare', 'map_nonrare', 'aligned_mean', 'train_s']
SECTIONS = [
    ('modes', 'Supervision', 'Weak (aligned) versus strong (matched) training.'),
    ('sparsity', 'Sparsity Weight', 'Weak training with different `lambda_sparse`.'),
    (
        'alpha',
        'Prior Mix',
        'Weak training with different `alpha_g` (`alpha_v = 1 - alpha_g`).',
    ),
    ('noise', 'Discretization Noise', 'Weak training with each noise variant.'),
]


def _row(name, runs):
    cells = [f'| **{name}**']
    for column in COLUMNS:
        values = np.array([run[column] for run in runs.values()])
        if column == 'train_s':
            cells.append(f'{values.mean():,.0f}s')
        else:
            cells.append(f'{values.mean():.4f} ± {values.std():.4f}')
    return ' | '.join(cells) + ' |'


def generate_simple_readme():
    """Generate README.md from experiment results using simple Python formatting"""
    results_file = Path(__file__).parent / 'results' / 'data.json'

    if not results_file.exists():
        print('No experiment results found. Run benchmarks first.')
        return

    with open(results_file) as f:
        data = json.load(f)

    content = []
    content.append('# alignformer Experiments\n')
    run_at = datetime.fromtimestamp(data['run_at']).strftime('%a %d %b %Y, %H:%M')
    seeds = ', '.join(map(str, data['seeds']))
    content.append(f'Run at: {run_at}  ')
    content.append(f'Environment: CPUs: {data["cpu"]}  ')
    content.append(f'Python version: {data["pyver"]}  ')
    content.append(f'alignformer version: {data["alignformer"]}  ')
    content.append(f'Epochs: {data["epochs"]}, seeds: {seeds}  \n')
    content.append(
        'Standard synthetic benchmark: 500 train / 100 test scenes, 4 verbs, 6 nouns, '
        'at most 2 interactions per scene, alignment settings of '
        '`alignformer.config.benchmark_align`. Values are mean ± std over seeds.\n'
    )

    results = data.get('results', {})
    header = '| Variant | ' + ' | '.join(COLUMNS) + ' |'
    rule = '| --- ' * (len(COLUMNS) + 1) + '|'
    for key, title, blurb in SECTIONS:
        if key not in results:
            continue
        content.append(f'## {title}\n')
        content.append(f'{blurb}\n')
        content.append(header)
        content.append(rule)
        for name, runs in results[key].items():
            content.append(_row(name, runs))
        content.append('\n')

    output_file = Path(__file__).parent / 'README.md'
    with open(output_file, 'w') as f:
        f.write('\n'.join(content))

    print(f'✓ Generated {output_file}')
    print(f'  Included experiments: {", ".join(results)}')


if __name__ == '__main__':
    generate_simple_readme()
