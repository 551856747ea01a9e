#!/usr/bin/env python3
"""
Convenience script to run alignformer experiments.
Usage:
    ./run.py                 # Weak versus strong supervision only
    ./run.py all             # Every experiment group
    ./run.py sparsity alpha  # Specific groups
"""

import os
import subprocess
import sys
from pathlib import Path

BENCHMARK_DIR = Path(__file__).parent


def main():
    args = sys.argv[1:] if len(sys.argv) > 1 else ['modes']

    if 'all' in args:
        args = ['modes', 'sparsity', 'alpha', 'noise']

    print(f'Running experiments: {", ".join(args)}')
    print('=' * 60)

    os.chdir(BENCHMARK_DIR)

    cmd = [sys.executable, 'benchmarks.py', *args]
    result = subprocess.run(cmd)  # noqa: S603

    if result.returncode == 0:
        print('\n' + '=' * 60)
        print('Experiments completed successfully!')
        print(f'Results saved to: {BENCHMARK_DIR}/results/data.json')
        print('\nTo generate formatted results:')
        print('  python render.py')
    else:
        print('\n' + '=' * 60)
        print('Experiments failed!')
        sys.exit(1)


if __name__ == '__main__':
    main()
