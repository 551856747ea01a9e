"""Tests for the synthetic scene generator"""

import numpy as np
import pytest

from alignformer.config import GeneratorConfig, VocabConfig
from alignformer.errors import ConfigError, DatasetError
from alignformer.scenegen import (
    GEOMETRY_CHANNELS,
    HUMAN,
    Box,
    Interaction,
    Scene,
    Vocabulary,
    generate_dataset,
    generate_scene,
    read_dataset,
    read_vocab,
    split_rare,
    write_dataset,
    write_vocab,
)


@pytest.fixture
def config():
    return GeneratorConfig()


@pytest.fixture
def vocab():
    return VocabConfig()


def _cell(box, cfg):
    row = min(int(box.cy * cfg.grid_h), cfg.grid_h - 1)
    col = min(int(box.cx * cfg.grid_w), cfg.grid_w - 1)
    return row, col


def _scene_with(interactions, scene_id=0):
    grid = np.zeros((2, 2, 6), dtype=np.float32)
    labels = sorted({(i.verb, i.noun) for i in interactions})
    return Scene(scene_id, [], interactions, labels, [], grid)


class TestBox:
    """Test box validation and geometry"""

    def test_rejects_out_of_range(self):
        """Test invalid centers and sizes"""
        with pytest.raises(ValueError, match='center'):
            Box(1.5, 0.5, 0.1, 0.1)
        with pytest.raises(ValueError, match='size'):
            Box(0.5, 0.5, 0.0, 0.1)

    def test_clipped(self):
        """Test clipping keeps boxes valid"""
        box = Box.clipped(1.2, -0.1, 0.0, 3.0)
        assert box.as_list() == [1.0, 0.0, 1e-3, 1.0]

    def test_corners_clip_to_unit_square(self):
        """Test corner form of a box hanging over the border"""
        assert Box(0.9, 0.5, 0.4, 0.2).corners() == pytest.approx((0.7, 0.4, 1.0, 0.6))


class TestGenerateScene:
    """Test one generated scene"""

    def test_deterministic(self, config, vocab):
        """Test identical seeds give identical scenes"""
        scene = generate_scene(7, config, vocab, 3)
        assert scene == generate_scene(7, config, vocab, 3)
        assert scene != generate_scene(8, config, vocab, 3)

    def test_structure(self, config, vocab):
        """Test humans first, valid interactions and derived labels"""
        for scene_id in range(30):
            scene = generate_scene(7, config, vocab, scene_id)
            categories = [inst.category for inst in scene.instances]
            humans = [i for i, c in enumerate(categories) if c == HUMAN]
            assert humans == list(range(len(humans)))
            assert config.min_humans <= len(humans) <= config.max_humans
            assert len(scene.interactions) <= config.max_interactions
            triples = {(i.human, i.object, i.verb) for i in scene.interactions}
            assert len(triples) == len(scene.interactions)
            for inter in scene.interactions:
                assert scene.instances[inter.human].category == HUMAN
                assert inter.noun == scene.instances[inter.object].category != HUMAN
            labels = {(i.verb, i.noun) for i in scene.interactions}
            assert scene.labels == sorted(labels)

    def test_detections_cover_instances(self, config, vocab):
        """Test every instance gets a jittered detection with a high score"""
        scene = generate_scene(7, config, vocab, 1)
        assert len(scene.detections) >= len(scene.instances)
        for inst, det in zip(scene.instances, scene.detections, strict=False):
            assert det.category == inst.category
            assert 0.5 <= det.score < 1.0
            limit = 2 * config.jitter_sigma + 1e-9
            assert abs(det.box.cx - inst.box.cx) <= limit
            assert abs(det.box.w - inst.box.w) <= limit
        for det in scene.detections[len(scene.instances) :]:
            assert 0.05 <= det.score < 0.5

    def test_no_false_positives_when_disabled(self, vocab):
        """Test fp_rate 0 gives exactly one detection per instance"""
        cfg = GeneratorConfig(fp_rate=0.0)
        for scene_id in range(10):
            scene = generate_scene(7, cfg, vocab, scene_id)
            assert len(scene.detections) == len(scene.instances)

    def test_grid_geometry_channels(self, vocab):
        """Test the last channels hold the absolute box of the instance"""
        cfg = GeneratorConfig(
            min_humans=1, max_humans=1, min_objects=1, max_objects=1, max_interactions=0
        )
        scene = generate_scene(7, cfg, vocab, 0)
        assert scene.grid.shape == (cfg.grid_h, cfg.grid_w, cfg.d_in)
        assert scene.grid.dtype == np.float32
        cells = [_cell(inst.box, cfg) for inst in scene.instances]
        if cells[0] != cells[1]:
            box = scene.instances[0].box
            geometry = scene.grid[cells[0]][-GEOMETRY_CHANNELS:]
            np.testing.assert_allclose(geometry, box.as_list(), rtol=1e-6)

    def test_invalid_config(self, vocab):
        """Test generator bounds are enforced"""
        with pytest.raises(ConfigError, match='d_in'):
            generate_scene(7, GeneratorConfig(d_in=4), vocab)
        with pytest.raises(ConfigError, match='interactions'):
            generate_scene(7, GeneratorConfig(max_interactions=4), vocab)


class TestDataset:
    """Test dataset generation, files and the rare split"""

    def test_parallel_matches_serial(self, config, vocab):
        """Test worker count does not change the scenes"""
        serial = generate_dataset(7, 12, config, vocab, start_id=5)
        parallel = generate_dataset(7, 12, config, vocab, start_id=5, workers=4)
        assert [s.scene_id for s in serial] == list(range(5, 17))
        assert serial == parallel

    def test_file_round_trip(self, tmp_path, config, vocab):
        """Test scenes survive the JSONL file"""
        scenes = generate_dataset(7, 5, config, vocab)
        write_dataset(scenes, tmp_path / 'train.jsonl')
        assert read_dataset(tmp_path / 'train.jsonl') == scenes

    def test_files_are_byte_identical(self, tmp_path, config, vocab):
        """Test two generations write identical bytes"""
        write_dataset(generate_dataset(7, 5, config, vocab), tmp_path / 'a.jsonl')
        write_dataset(generate_dataset(7, 5, config, vocab), tmp_path / 'b.jsonl')
        first = (tmp_path / 'a.jsonl').read_bytes()
        assert first == (tmp_path / 'b.jsonl').read_bytes()

    def test_malformed_line(self, tmp_path, config, vocab):
        """Test the reader names the broken line"""
        path = tmp_path / 'bad.jsonl'
        write_dataset(generate_dataset(7, 2, config, vocab), path)
        with open(path, 'a', encoding='utf-8') as f:
            f.write('{"scene_id": 9}\n')
        with pytest.raises(DatasetError, match='line 3'):
            read_dataset(path)

    def test_empty_file(self, tmp_path):
        """Test an empty file reads as no scenes"""
        path = tmp_path / 'empty.jsonl'
        path.write_text('')
        assert read_dataset(path) == []

    def test_truncated_last_line(self, tmp_path, config, vocab):
        """Test a cut-off final record is reported by its line number"""
        path = tmp_path / 'cut.jsonl'
        write_dataset(generate_dataset(7, 3, config, vocab), path)
        text = path.read_text(encoding='utf-8')
        path.write_text(text[: len(text) - 40], encoding='utf-8')
        with pytest.raises(DatasetError, match='line 3'):
            read_dataset(path)

    def test_vocab_round_trip(self, tmp_path, config, vocab):
        """Test the vocabulary file"""
        original = Vocabulary(vocab, 7, config, {(0, 1)}, {(2, 3), (1, 1)})
        write_vocab(original, tmp_path / 'vocab.json')
        assert read_vocab(tmp_path / 'vocab.json') == original


class TestSplitRare:
    """Test the rare-class rule at its boundaries"""

    def test_threshold_boundaries(self):
        """Test counts at, above and below the threshold"""
        at = [Interaction(0, 1, 0, 1)] * 10
        above = [Interaction(0, 1, 1, 2)] * 11
        once = [Interaction(0, 1, 2, 3)]
        dataset = [_scene_with([i], n) for n, i in enumerate(at + above + once)]
        rare, nonrare = split_rare(dataset, VocabConfig(rare_threshold=10))
        assert rare == {(0, 1), (2, 3)}
        assert nonrare == {(1, 2)}
        assert (3, 4) not in rare | nonrare

    def test_configurable_threshold(self):
        """Test a lower threshold moves classes to non-rare"""
        dataset = [_scene_with([Interaction(0, 1, 0, 1)], n) for n in range(3)]
        assert split_rare(dataset, VocabConfig(rare_threshold=2)) == (set(), {(0, 1)})
        assert split_rare(dataset, VocabConfig(rare_threshold=3)) == ({(0, 1)}, set())

    def test_zero_threshold(self):
        """Test threshold 0 leaves every seen class non-rare"""
        dataset = [_scene_with([Interaction(0, 1, 0, 1)])]
        assert split_rare(dataset, VocabConfig(rare_threshold=0)) == (set(), {(0, 1)})

    def test_empty(self):
        """Test an empty dataset"""
        with pytest.raises(DatasetError, match='empty'):
            split_rare([], VocabConfig())
