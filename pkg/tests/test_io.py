import numpy as np
import pytest

from crowdrefine import odgt
from crowdrefine.config import ConfigError, load_config, stage_config_text
from crowdrefine.stage import StageConfig


def ann(image_id, boxes, tags=None, ignore=()):
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 4) if len(boxes) else np.zeros((0, 4))
    return odgt.ImageAnnotation(
        image_id=image_id, boxes=boxes,
        tags=tags or ["person"] * boxes.shape[0],
        ignore_regions=np.asarray(ignore, dtype=float).reshape(-1, 4) if len(ignore) else np.zeros((0, 4)))


class TestOdgtRoundTrip:
    def test_lossless_for_read_fields(self, tmp_path):
        path = tmp_path / "gt.odgt"
        original = [
            ann("img_a", [[1, 2, 11, 22], [5, 5, 25, 45]], ["person", "rider"],
                ignore=[[100, 100, 150, 150]]),
            ann("img_b", []),
        ]
        odgt.write_odgt(path, original)
        reread = odgt.read_odgt(path)
        odgt.write_odgt(tmp_path / "again.odgt", reread)
        assert (tmp_path / "again.odgt").read_bytes() == path.read_bytes()
        assert reread[0].image_id == "img_a"
        assert np.array_equal(reread[0].boxes, original[0].boxes)
        assert reread[0].tags == ["person", "rider"]
        assert np.array_equal(reread[0].ignore_regions, original[0].ignore_regions)
        assert reread[1].boxes.shape == (0, 4)

    def test_fbox_conversion(self, tmp_path):
        path = tmp_path / "gt.odgt"
        path.write_text('{"ID": "x", "gtboxes": [{"tag": "person", '
                        '"fbox": [10, 20, 5, 8]}]}\n')
        rec = odgt.read_odgt(path)[0]
        assert rec.boxes.tolist() == [[10, 20, 15, 28]]

    def test_ignore_flag_default_zero(self, tmp_path):
        path = tmp_path / "gt.odgt"
        path.write_text('{"ID": "x", "gtboxes": [{"tag": "person", '
                        '"fbox": [0, 0, 5, 5]}]}\n')
        rec = odgt.read_odgt(path)[0]
        assert rec.boxes.shape == (1, 4)
        assert rec.ignore_regions.shape == (0, 4)


class TestOdgtErrors:
    def test_bad_json_reports_line(self, tmp_path):
        path = tmp_path / "gt.odgt"
        path.write_text('{"ID": "a", "gtboxes": []}\nnot json\n')
        with pytest.raises(odgt.OdgtParseError) as exc:
            odgt.read_odgt(path)
        assert exc.value.line == 2

    def test_negative_size_rejected(self, tmp_path):
        path = tmp_path / "gt.odgt"
        path.write_text('{"ID": "a", "gtboxes": [{"fbox": [0, 0, -1, 5]}]}\n')
        with pytest.raises(odgt.OdgtParseError) as exc:
            odgt.read_odgt(path)
        assert exc.value.line == 1

    def test_duplicate_id_rejected(self, tmp_path):
        path = tmp_path / "gt.odgt"
        path.write_text('{"ID": "a", "gtboxes": []}\n{"ID": "a", "gtboxes": []}\n')
        with pytest.raises(odgt.OdgtParseError):
            odgt.read_odgt(path)

    def test_detection_score_range_checked(self, tmp_path):
        path = tmp_path / "dt.jsonl"
        path.write_text('{"ID": "a", "dtboxes": [{"box": [0, 0, 5, 5], '
                        '"score": 1.5}]}\n')
        with pytest.raises(odgt.OdgtParseError):
            odgt.read_detections(path)

    def test_missing_file_raises_filenotfound(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            odgt.read_odgt(tmp_path / "absent.odgt")


class TestDetectionsAndFeatures:
    def test_detections_round_trip(self, tmp_path):
        path = tmp_path / "dt.jsonl"
        dets = [odgt.ImageDetections(
            image_id="a", boxes=np.array([[1.0, 2, 11, 22]]),
            scores=np.array([0.75]), tags=["person"])]
        odgt.write_detections(path, dets)
        reread = odgt.read_detections(path)
        odgt.write_detections(tmp_path / "again.jsonl", reread)
        assert (tmp_path / "again.jsonl").read_bytes() == path.read_bytes()
        assert reread[0].scores.tolist() == [0.75]

    def test_features_round_trip(self, tmp_path):
        path = tmp_path / "ft.jsonl"
        feats = {"a": np.arange(12.0).reshape(3, 4), "b": np.zeros((0, 0))}
        odgt.write_features(path, feats)
        reread = odgt.read_features(path)
        assert np.array_equal(reread["a"], feats["a"])

    def test_ragged_features_rejected(self, tmp_path):
        path = tmp_path / "ft.jsonl"
        path.write_text('{"ID": "a", "features": [[1, 2], [3]]}\n')
        with pytest.raises(odgt.OdgtParseError):
            odgt.read_features(path)


class TestConfig:
    def test_defaults_and_overrides(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("[scene]\nseed = 3\nobjects_per_image = 10.5\n"
                        "[train]\nepochs = 2\nstrategy = merged\n")
        cfg = load_config(path)
        assert cfg.scene.seed == 3
        assert cfg.scene.objects_per_image == 10.5
        assert cfg.scene.overlaps_per_image == 2.40
        assert cfg.train.epochs == 2
        assert cfg.train.strategy == "merged"
        assert len(cfg.sha256) == 64

    def test_seed_required(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("[scene]\nobjects_per_image = 5\n")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("[scene]\nseed = 1\nbogus = 2\n")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_unknown_section_rejected(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("[scene]\nseed = 1\n[mystery]\nx = 1\n")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_invalid_value_rejected(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("[scene]\nseed = 1\n[stage]\nd = not_a_number\n")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_semantic_validation_propagates(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("[scene]\nseed = 1\n[stage]\nd = 30\nheads = 4\n")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_stage_config_text_round_trips(self, tmp_path):
        text = stage_config_text(StageConfig(s=0.65, d=64, d_enc=40, heads=4))
        path = tmp_path / "stage.cfg"
        path.write_text("[scene]\nseed = 0\n" + text)
        cfg = load_config(path)
        assert cfg.stage.s == 0.65
        assert cfg.stage.d == 64
