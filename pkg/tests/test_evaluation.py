"""Tests for HOI mean average precision"""

import dataclasses

import numpy as np
import pytest

from alignformer import model as net
from alignformer.config import EvalConfig, GeneratorConfig, ModelConfig, VocabConfig
from alignformer.errors import CheckpointError, EvaluationError
from alignformer.evaluation import (
    GroundTruth,
    ScoredDetection,
    average_precision,
    emit_detections,
    evaluate,
    evaluate_detections,
    evaluate_model,
    iou,
    match_pair,
    oracle_detections,
    read_summary,
    true_positive_flags,
    write_report,
)
from alignformer.scenegen import (
    Box,
    Instance,
    Interaction,
    Scene,
    Vocabulary,
    generate_dataset,
    split_rare,
)

SMALL = GeneratorConfig(
    max_humans=2, max_objects=2, max_interactions=2, grid_h=4, grid_w=4, d_in=8
)
BOXES = [
    Box(0.25, 0.25, 0.2, 0.2),
    Box(0.27, 0.25, 0.2, 0.2),
    Box(0.75, 0.75, 0.2, 0.2),
    Box(0.5, 0.5, 0.4, 0.4),
]


@pytest.fixture
def vocab():
    return VocabConfig(num_verbs=3, num_nouns=4)


@pytest.fixture
def dataset(vocab):
    return generate_dataset(7, 20, SMALL, vocab)


def _det(score, index=0, scene_id=0, human=0, obj=2, verb=0, noun=1):
    return ScoredDetection(scene_id, BOXES[human], BOXES[obj], verb, noun, score, index)


def _gt(scene_id=0, human=0, obj=2, verb=0, noun=1):
    return GroundTruth(scene_id, BOXES[human], BOXES[obj], verb, noun)


def _brute_force_ap(dets, gts, thresh):
    """Sum over true positives of the best precision at or below their rank."""
    consumed = set()
    flags = []
    for det in dets:
        best, best_overlap = None, -1.0
        for g, gt in enumerate(gts):
            if g in consumed or gt.scene_id != det.scene_id:
                continue
            ih, io = iou(det.human, gt.human), iou(det.object, gt.object)
            if ih >= thresh and io >= thresh and min(ih, io) > best_overlap:
                best, best_overlap = g, min(ih, io)
        flags.append(best is not None)
        if best is not None:
            consumed.add(best)
    precision = [sum(flags[: k + 1]) / (k + 1) for k in range(len(flags))]
    total = 0.0
    for k, hit in enumerate(flags):
        if hit:
            total += max(precision[k:])
    return total / len(gts)


def _tiny_scene(scene_id, interactions):
    instances = [Instance(0, BOXES[0]), Instance(1, BOXES[2]), Instance(2, BOXES[3])]
    labels = sorted({(i.verb, i.noun) for i in interactions})
    grid = np.zeros((4, 4, 8), dtype=np.float32)
    return Scene(scene_id, instances, interactions, labels, [], grid)


class TestMatching:
    """Test IoU and pair matching"""

    def test_iou(self):
        """Test identical, disjoint and half-overlapping boxes"""
        a = Box(0.5, 0.5, 0.2, 0.2)
        assert iou(a, a) == pytest.approx(1.0)
        assert iou(a, Box(0.1, 0.1, 0.1, 0.1)) == 0.0
        shifted = Box(0.6, 0.5, 0.2, 0.2)
        assert iou(a, shifted) == pytest.approx(1 / 3)

    def test_threshold_is_inclusive(self):
        """Test an IoU exactly at the threshold matches"""
        det = _det(0.9, human=0, obj=2)
        gt = GroundTruth(0, Box(0.6, 0.5, 0.2, 0.2), BOXES[2], 0, 1)
        shifted = ScoredDetection(0, Box(0.5, 0.5, 0.2, 0.2), BOXES[2], 0, 1, 0.9)
        overlap = iou(shifted.human, gt.human)
        assert match_pair(shifted, gt, thresh=overlap)
        assert not match_pair(shifted, gt, thresh=overlap + 1e-9)
        assert match_pair(det, _gt())

    def test_class_must_match(self):
        """Test verb and noun both participate in matching"""
        assert not match_pair(_det(0.9, verb=1), _gt())
        assert not match_pair(_det(0.9, noun=2), _gt())

    def test_each_ground_truth_consumed_once(self):
        """Test a duplicate detection becomes a false positive"""
        flags = true_positive_flags([_det(0.9, 0), _det(0.8, 1)], [_gt()])
        assert flags == [True, False]

    def test_prefers_best_overlap(self):
        """Test the detection takes the unconsumed pair it overlaps most"""
        gts = [_gt(human=1), _gt(human=0)]
        flags = true_positive_flags([_det(0.9, 0, human=0), _det(0.8, 1, human=1)], gts)
        assert flags == [True, True]

    def test_other_scene_never_matches(self):
        """Test ground truth is only matched within its scene"""
        flags = true_positive_flags([_det(0.9, scene_id=1)], [_gt(scene_id=0)])
        assert flags == [False]

    def test_unsorted_input(self):
        """Test unsorted detections are rejected"""
        with pytest.raises(EvaluationError, match='sorted'):
            average_precision([_det(0.5, 0), _det(0.9, 1)], [_gt()])


class TestAveragePrecision:
    """Test the precision/recall integral"""

    def test_edge_cases(self):
        """Test empty inputs give zero"""
        assert average_precision([], [_gt()]) == 0.0
        assert average_precision([_det(0.9)], []) == 0.0

    def test_perfect_ranking(self):
        """Test all true positives ranked first give one"""
        dets = [_det(0.9, 0, human=0), _det(0.8, 1, human=3), _det(0.7, 2, obj=3)]
        gts = [_gt(human=0)]
        assert average_precision(dets, gts) == pytest.approx(1.0)

    def test_false_positive_first(self):
        """Test one leading false positive halves the precision"""
        dets = [_det(0.9, 0, obj=3), _det(0.8, 1)]
        assert average_precision(dets, [_gt()]) == pytest.approx(0.5)

    def test_against_brute_force(self):
        """Test random small instances against the precision-sum form"""
        rng = np.random.default_rng(0)
        for _ in range(200):
            gts = [
                _gt(
                    scene_id=int(rng.integers(0, 2)),
                    human=int(rng.integers(0, 2)),
                    obj=int(rng.integers(2, 4)),
                )
                for _ in range(int(rng.integers(1, 5)))
            ]
            dets = [
                _det(
                    float(rng.choice([0.2, 0.5, 0.9])),
                    index,
                    scene_id=int(rng.integers(0, 2)),
                    human=int(rng.integers(0, 4)),
                    obj=int(rng.integers(2, 4)),
                )
                for index in range(int(rng.integers(1, 7)))
            ]
            dets.sort(key=ScoredDetection.rank_key)
            expected = _brute_force_ap(dets, gts, 0.5)
            assert abs(average_precision(dets, gts) - expected) <= 1e-9


    @staticmethod
    def _random_case(rng):
        gts = [
            _gt(
                scene_id=int(rng.integers(0, 2)),
                human=int(rng.integers(0, 2)),
                obj=int(rng.integers(2, 4)),
            )
            for _ in range(int(rng.integers(1, 5)))
        ]
        dets = [
            _det(
                float(rng.random()),
                index,
                scene_id=int(rng.integers(0, 2)),
                human=int(rng.integers(0, 4)),
                obj=int(rng.integers(2, 4)),
            )
            for index in range(int(rng.integers(1, 7)))
        ]
        dets.sort(key=ScoredDetection.rank_key)
        return dets, gts

    @pytest.mark.parametrize('factor', [0.25, 8.0])
    def test_positive_scaling_invariance(self, factor):
        """Test scaling every score by a positive factor leaves AP unchanged"""
        rng = np.random.default_rng(1)
        for _ in range(100):
            dets, gts = self._random_case(rng)
            scaled = [dataclasses.replace(d, score=d.score * factor) for d in dets]
            scaled.sort(key=ScoredDetection.rank_key)
            assert average_precision(scaled, gts) == average_precision(dets, gts)

    def test_false_positive_never_helps(self):
        """Test a copy of a detection with an unmatched noun cannot raise AP"""
        rng = np.random.default_rng(2)
        for _ in range(100):
            dets, gts = self._random_case(rng)
            copy = dets[int(rng.integers(0, len(dets)))]
            copy = dataclasses.replace(copy, noun=3, index=len(dets))
            extended = [*dets, copy]
            extended.sort(key=ScoredDetection.rank_key)
            assert average_precision(extended, gts) <= average_precision(dets, gts)


class TestEmitDetections:
    """Test turning prediction arrays into ranked detections"""

    @pytest.fixture
    def arrays(self):
        return {
            'human': np.array(
                [[0.3, 0.3, 0.2, 0.2], [0.6, 0.6, 0.2, 0.2]], dtype=np.float32
            ),
            'object': np.array(
                [[0.7, 0.7, 0.2, 0.2], [0.4, 0.4, 0.2, 0.2]], dtype=np.float32
            ),
            'verb': np.array([[0.9, 0.1], [0.5, 0.5]], dtype=np.float32),
            'noun': np.array([[0.5, 0.5, 0.0], [0.2, 0.8, 0.0]], dtype=np.float32),
        }

    def test_order_and_indices(self, arrays):
        """Test score order with the flat index breaking ties"""
        dets = emit_detections(3, arrays, EvalConfig(top_k=100, score_floor=1e-4))
        assert len(dets) == 8
        assert [d.index for d in dets[:3]] == [0, 1, 7]
        assert dets[0].score == pytest.approx(0.45)
        assert (dets[2].verb, dets[2].noun) == (0, 1)
        assert all(d.scene_id == 3 for d in dets)
        assert dets[0].human.as_list() == pytest.approx([0.3, 0.3, 0.2, 0.2])

    def test_top_k_and_floor(self, arrays):
        """Test truncation and the score floor"""
        assert len(emit_detections(0, arrays, EvalConfig(top_k=2))) == 2
        dets = emit_detections(0, arrays, EvalConfig(score_floor=0.3))
        assert [round(d.score, 6) for d in dets] == [0.45, 0.45, 0.4, 0.4]


class TestEvaluateDetections:
    """Test per-class aggregation"""

    def test_oracle_scores_one(self, dataset, vocab):
        """Test replayed ground truth gives a perfect report"""
        rare, nonrare = split_rare(dataset, vocab)
        report = evaluate_detections(oracle_detections(dataset), dataset, rare, nonrare)
        assert report.map_full == pytest.approx(1.0)
        assert report.mean_max_recall == pytest.approx(1.0)
        assert set(report.rare) | set(report.nonrare) == set(report.per_class_ap)

    def test_no_ground_truth(self):
        """Test a dataset without interactions is an error"""
        with pytest.raises(EvaluationError, match='ground-truth'):
            evaluate_detections([], [_tiny_scene(0, [])], set(), set())

    def test_empty_splits_are_zero(self):
        """Test rare and non-rare means default to zero"""
        scene = _tiny_scene(0, [Interaction(0, 1, 2, 1)])
        report = evaluate_detections([], [scene], set(), set())
        assert report.per_class_ap == {'2:1': 0.0}
        assert report.map_rare == 0.0
        assert report.map_nonrare == 0.0

    def test_missed_class(self):
        """Test classes without detections still count in the mean"""
        scenes = [_tiny_scene(0, [Interaction(0, 1, 0, 1), Interaction(0, 2, 1, 2)])]
        dets = [d for d in oracle_detections(scenes) if d.verb == 0]
        report = evaluate_detections(dets, scenes, {(0, 1)}, {(1, 2)})
        assert report.map_full == pytest.approx(0.5)
        assert report.map_rare == pytest.approx(1.0)
        assert report.map_nonrare == 0.0
        assert report.counts['1:2'] == {'ground_truth': 1, 'detections': 0}

    def test_report_files(self, tmp_path, dataset, vocab):
        """Test the JSON report and CSV summary"""
        rare, nonrare = split_rare(dataset, vocab)
        report = evaluate_detections(oracle_detections(dataset), dataset, rare, nonrare)
        write_report(report, tmp_path / 'r.json', tmp_path / 's.csv', {'seed': 7})
        summary = read_summary(tmp_path / 's.csv')
        assert float(summary['map_full']) == report.map_full
        assert int(summary['classes']) == len(report.per_class_ap)
        assert (tmp_path / 's.csv').read_text().startswith('# {"seed": 7}')


class TestEvaluateModel:
    """Test evaluation of model parameters"""

    @pytest.fixture
    def model_cfg(self):
        return ModelConfig(
            d_model=8, num_queries=4, enc_layers=1, dec_layers=1, dropout=0.0
        )

    def test_random_weights(self, dataset, vocab, model_cfg):
        """Test an untrained model gives a valid report"""
        rare, nonrare = split_rare(dataset, vocab)
        words = Vocabulary(vocab, 7, SMALL, rare, nonrare)
        params = net.init_params(model_cfg, vocab, SMALL.d_in, seed=1)
        report = evaluate_model(params, model_cfg, dataset, words, EvalConfig(top_k=20))
        parallel = evaluate_model(
            params, model_cfg, dataset, words, EvalConfig(top_k=20), workers=3
        )
        assert 0.0 <= report.map_full <= 1.0
        assert report.to_dict() == parallel.to_dict()

    def test_vocabulary_mismatch(self, tmp_path, dataset, vocab, model_cfg):
        """Test a checkpoint for another vocabulary is rejected"""
        params = net.init_params(model_cfg, vocab, SMALL.d_in, seed=1)
        net.save_model(tmp_path / 'ck', params, model_cfg, vocab, SMALL.d_in)
        other = Vocabulary(VocabConfig(num_verbs=5, num_nouns=4), 7, SMALL)
        with pytest.raises(CheckpointError, match='vocabulary'):
            evaluate(tmp_path / 'ck', dataset, other)

    def test_reports_are_byte_identical(self, tmp_path, dataset, vocab, model_cfg):
        """Test evaluating the same weights twice writes the same files"""
        rare, nonrare = split_rare(dataset, vocab)
        words = Vocabulary(vocab, 7, SMALL, rare, nonrare)
        params = net.init_params(model_cfg, vocab, SMALL.d_in, seed=2)
        written = []
        for run in ('a', 'b'):
            report = evaluate_model(params, model_cfg, dataset, words)
            paths = (tmp_path / f'{run}.json', tmp_path / f'{run}.csv')
            write_report(report, *paths, {'seed': 2})
            written.append([p.read_bytes() for p in paths])
        assert written[0] == written[1]
