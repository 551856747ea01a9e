#!/usr/bin/env python3
"""
Check if all experiment dependencies are installed.
"""

import sys


def check_dependencies():
    """Check if required packages are available"""
    missing = []

    for name in ('numpy', 'scipy', 'alignformer'):
        try:
            module = __import__(name)
            print(f'✓ {name} {module.__version__}')
        except ImportError:
            print(f'✗ {name} (required)')
            missing.append(name)

    if missing:
        print('\n' + '=' * 60)
        print('Missing required dependencies!')
        print('\nInstall with:')
        print('  pip install -r requirements.txt')
        print('  pip install -e ..')
        return False

    print('\n' + '=' * 60)
    print('All required dependencies are installed!')
    print('You can now run experiments with:')
    print('  python run.py')
    print('  python benchmarks.py modes sparsity alpha noise')
    return True


if __name__ == '__main__':
    success = check_dependencies()
    sys.exit(0 if success else 1)
