import dataclasses
import datetime
import json
import os
import subprocess
import sys
import time
from pathlib import Path

from alignformer.config import benchmark_align
from alignformer.evaluation import read_summary
from alignformer.trainer import read_metrics

WD = Path(__file__).resolve().parent
DATA = WD / 'results' / 'data'
RUNS = WD / 'results' / 'runs'
SEEDS = [7, 8, 9]
EPOCHS = int(os.environ.get('BENCHMARK_EPOCHS', '200'))
STANDARD = [
    '--set',
    'generator.max_interactions=2',
    '--set',
    'model.dropout=0',
    '--set',
    'train.lr_decay_epoch=160',
    *(
        item
        for key, value in dataclasses.asdict(benchmark_align()).items()
        for item in ('--set', f'align.{key}={value}')
    ),
]


def _python():
    exc_prefix = os.environ.get('BENCHMARK_EXC_PREFIX')
    return f'{exc_prefix}/python' if exc_prefix else sys.executable


def cli(*args):
    """Run one alignformer command and return its wall time in seconds"""
    cmd = [_python(), '-m', 'alignformer', *map(str, args), '--log-level', 'WARNING']
    start = time.perf_counter()
    subprocess.run(cmd, check=True, capture_output=True)  # noqa: S603
    return time.perf_counter() - start


def dataset():
    """Generate the standard benchmark once: 500 train, 100 val, 100 test scenes"""
    if not (DATA / 'vocab.json').exists():
        cli('gen-data', '--out', DATA, '--seed', 7, '--scenes', 500, *STANDARD)
    return DATA


def _summary(path):
    return {k: float(v) for k, v in read_summary(path).items()}


def experiment(name, seed, *overrides, mode='weak'):
    """Train one configuration and evaluate its final checkpoint on the test split"""
    data = dataset()
    out = RUNS / f'{name}-{seed}'
    extra = [item for key in overrides for item in ('--set', key)]
    train_s = cli(
        'train',
        '--data', data,
        '--out', out,
        '--mode', mode,
        '--seed', seed,
        '--epochs', EPOCHS,
        *STANDARD,
        *extra,
    )
    eval_s = cli(
        'eval', '--data', data, '--checkpoint', out / 'final', '--out', out / 'eval'
    )
    result = _summary(out / 'eval' / 'summary.csv')
    last = read_metrics(out / 'metrics.csv')[-1]
    result['aligned_mean'] = float(last['aligned_mean'])
    result['train_s'] = train_s
    result['eval_s'] = eval_s
    print(f'{name} seed {seed}: map_full {result["map_full"]:.4f}')
    return result


def modes():
    """Weak versus strong supervision with the same budget"""
    results = {}
    for mode in ('weak', 'strong'):
        results[mode] = {
            str(seed): experiment(mode, seed, mode=mode) for seed in SEEDS
        }
    return results


def sparsity():
    """Sweep the sparsity weight of the weak objective"""
    results = {}
    for weight in ('0', '0.5', '1'):
        results[weight] = {
            str(seed): experiment(
                f'sparse{weight}', seed, f'train.lambda_sparse={weight}'
            )
            for seed in SEEDS
        }
    return results


def alpha():
    """Sweep the geometric/visual prior mix"""
    results = {}
    for alpha_g in ('0.25', '0.5', '0.75'):
        alpha_v = str(1 - float(alpha_g))
        results[alpha_g] = {
            str(seed): experiment(
                f'alpha{alpha_g}',
                seed,
                f'align.alpha_g={alpha_g}',
                f'align.alpha_v={alpha_v}',
            )
            for seed in SEEDS
        }
    return results


def noise():
    """Compare logistic, gumbel and no discretization noise"""
    variants = {
        'logistic': ['align.noise_kind=logistic'],
        'gumbel': ['align.noise_kind=gumbel'],
        'off': ['align.noise=false'],
    }
    return {
        name: {str(seed): experiment(f'noise-{name}', seed, *keys) for seed in SEEDS}
        for name, keys in variants.items()
    }


def _alignformer_version():
    """Get the version of alignformer"""
    import alignformer

    return alignformer.__version__


def run():
    """Run the selected experiment groups and save results"""
    all_benchmarks = {
        'modes': modes,
        'sparsity': sparsity,
        'alpha': alpha,
        'noise': noise,
    }
    inp_benchmarks = sys.argv[1:] or ['modes']
    run_benchmarks = [k for k in all_benchmarks if k in inp_benchmarks]

    now = datetime.datetime.now(datetime.UTC)
    results = {}
    for benchmark_key in run_benchmarks:
        runner = all_benchmarks[benchmark_key]
        results[benchmark_key] = runner()

    (WD / 'results').mkdir(exist_ok=True)
    with open(WD / 'results' / 'data.json', 'w') as f:
        pyver = sys.version_info
        f.write(
            json.dumps(
                {
                    'cpu': os.cpu_count(),
                    'run_at': int(now.timestamp()),
                    'pyver': f'{pyver.major}.{pyver.minor}',
                    'epochs': EPOCHS,
                    'seeds': SEEDS,
                    'results': results,
                    'alignformer': _alignformer_version(),
                }
            )
        )


if __name__ == '__main__':
    run()
