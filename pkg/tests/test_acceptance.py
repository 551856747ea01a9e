"""End-to-end training on the standard synthetic benchmark

These runs train full models for hundreds of epochs and are deselected by
default; run them with ``pytest -m slow``.
"""

import time

import numpy as np
import pytest

from alignformer import model as net
from alignformer.config import (
    GeneratorConfig,
    ModelConfig,
    RunConfig,
    VocabConfig,
    benchmark_align,
)
from alignformer.evaluation import evaluate_model
from alignformer.scenegen import Vocabulary, generate_dataset, split_rare
from alignformer.trainer import train

pytestmark = pytest.mark.slow

GENERATOR = GeneratorConfig(max_interactions=2)
VOCAB = VocabConfig()
MODEL = ModelConfig(dropout=0.0)
SEEDS = (7, 8, 9)
EPOCHS = 200


@pytest.fixture(scope='module')
def benchmark_data():
    train_set = generate_dataset(7, 500, GENERATOR, VOCAB)
    test_set = generate_dataset(7, 100, GENERATOR, VOCAB, start_id=500)
    rare, nonrare = split_rare(train_set, VOCAB)
    return train_set, test_set, Vocabulary(VOCAB, 7, GENERATOR, rare, nonrare)


@pytest.fixture(scope='module')
def trained(tmp_path_factory, benchmark_data):
    train_set, test_set, vocab = benchmark_data
    cache = {}

    def run(mode, seed, lambda_sparse=1.0):
        key = (mode, seed, lambda_sparse)
        if key not in cache:
            cfg = RunConfig(mode=mode, seed=seed, generator=GENERATOR, vocab=VOCAB)
            cfg.model = MODEL
            cfg.align = benchmark_align()
            cfg.train.epochs = EPOCHS
            cfg.train.lr_decay_epoch = 160
            cfg.train.eval_every = 0
            cfg.train.lambda_sparse = lambda_sparse
            out = tmp_path_factory.mktemp(f'{mode}-{seed}-{lambda_sparse}')
            start = time.perf_counter()
            result = train(train_set, vocab, cfg, out)
            elapsed = time.perf_counter() - start
            report = evaluate_model(result.params, MODEL, test_set, vocab)
            cache[key] = (result, report, elapsed)
        return cache[key]

    return run


def _untrained_map(seed, benchmark_data):
    _, test_set, vocab = benchmark_data
    params = net.init_params(MODEL, vocab, GENERATOR.d_in, seed)
    return evaluate_model(params, MODEL, test_set, vocab).map_full


def test_untrained_is_near_chance(benchmark_data):
    """Test random weights score close to zero"""
    for seed in range(5):
        assert _untrained_map(seed, benchmark_data) < 0.05


def test_weak_training_learns(trained, benchmark_data):
    """Test weak supervision reaches the benchmark floor"""
    _, report, elapsed = trained('weak', 7)
    assert elapsed < 30 * 60
    assert report.map_full >= 0.40
    assert report.map_full >= 5 * _untrained_map(7, benchmark_data)


@pytest.mark.parametrize('seed', SEEDS)
def test_strong_not_worse_than_weak(trained, seed):
    """Test alignment supervision is at least as good as weak supervision"""
    _, weak, _ = trained('weak', seed)
    _, strong, _ = trained('strong', seed)
    assert strong.map_full >= weak.map_full


@pytest.mark.parametrize('seed', SEEDS)
def test_sparsity_weight(trained, seed):
    """Test the sparsity term lowers the aligned count without hurting mAP"""
    sparse, sparse_report, _ = trained('weak', seed, 1.0)
    dense, dense_report, _ = trained('weak', seed, 0.0)
    final = np.mean([r['aligned_mean'] for r in sparse.rows[-10:]])
    baseline = np.mean([r['aligned_mean'] for r in dense.rows[-10:]])
    assert final < baseline
    assert sparse_report.map_full >= dense_report.map_full - 0.05
