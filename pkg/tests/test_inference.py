import numpy as np
import pytest
import torch

from slotflow import inference
from slotflow.inference import (
    EvalReport,
    InferenceConfig,
    MaskTrack,
    SequenceScores,
    ensemble_sequence,
    evaluate,
    jaccard,
    predict_window,
)
from slotflow.model import build_model

from helpers import micro_model_config


@pytest.fixture(scope="module")
def micro_model():
    return build_model(micro_model_config(), seed=0).eval()


def _frames(n, h=32, w=64, seed=0):
    return np.random.default_rng(seed).random((n, h, w, 3)).astype(np.float32)


class TestJaccard:
    def test_identical_nonempty(self):
        m = np.zeros((4, 4), bool)
        m[1:3, 1:3] = True
        assert jaccard(m, m) == 1.0

    def test_disjoint(self):
        a = np.zeros((4, 4), bool)
        b = np.zeros((4, 4), bool)
        a[0, 0] = True
        b[3, 3] = True
        assert jaccard(a, b) == 0.0

    def test_offset_blocks_pixel_count(self):
        # 2x2 blocks at (0,0) and (0,1): intersection 2 px, union 6 px
        a = np.zeros((4, 4), bool)
        b = np.zeros((4, 4), bool)
        a[0:2, 0:2] = True
        b[0:2, 1:3] = True
        inter = int(np.logical_and(a, b).sum())
        union = int(np.logical_or(a, b).sum())
        assert (inter, union) == (2, 6)
        assert jaccard(a, b) == pytest.approx(2 / 6)

    def test_both_empty_is_one(self):
        assert jaccard(np.zeros((3, 3), bool), np.zeros((3, 3), bool)) == 1.0

    def test_symmetric(self, rng):
        a = rng.random((6, 6)) > 0.5
        b = rng.random((6, 6)) > 0.5
        assert jaccard(a, b) == jaccard(b, a)


class TestPredictWindow:
    def test_default_offsets_cover_every_frame(self, micro_model):
        soft, valid = predict_window(micro_model, _frames(4))
        assert soft.shape == (4, 32, 64)
        assert valid.all()
        assert soft.min() >= 0.0 and soft.max() <= 1.0

    def test_single_offset_no_averaging(self, micro_model):
        cfg = InferenceConfig(target_offsets=[1])
        soft, valid = predict_window(micro_model, _frames(4), cfg)
        # the last frame has no +1 target inside the window
        assert valid[:3].all() and not valid[3]

    def test_single_offset_matches_pair_decode(self, micro_model):
        cfg = InferenceConfig(target_offsets=[1])
        frames = _frames(4)
        soft, _ = predict_window(micro_model, frames, cfg)
        clip = torch.from_numpy(frames).permute(0, 3, 1, 2)[None]
        with torch.no_grad():
            fv = micro_model.encode_clip(clip)
            pairs = micro_model.reconstruct_pairs(fv.fused, [(0, i, i + 1) for i in range(3)])
        alphas = np.stack([p.alphas[0, :, 0].numpy() for p in pairs])
        flows = np.stack([p.layer_flows[0].numpy() for p in pairs])
        fg = inference.select_foreground_slot(alphas, flows)
        assert np.allclose(soft[0], alphas[0, fg], atol=1e-6)

    def test_no_pairs_rejected(self, micro_model):
        with pytest.raises(ValueError):
            predict_window(micro_model, _frames(4), InferenceConfig(target_offsets=[9]))


class TestForegroundSelection:
    def test_smaller_area_wins(self):
        alphas = np.zeros((3, 2, 8, 8))
        alphas[:, 0] = 0.9
        alphas[:, 1] = 0.1
        flows = np.zeros((3, 2, 3, 8, 8))
        assert inference.select_foreground_slot(alphas, flows) == 1

    def test_tie_breaks_on_flow_variance(self, rng):
        alphas = np.full((2, 2, 4, 4), 0.5)
        flows = np.zeros((2, 2, 3, 4, 4))
        flows[:, 1] = rng.random((2, 3, 4, 4))
        assert inference.select_foreground_slot(alphas, flows) == 1


class TestEnsemble:
    def test_window_length_equals_predict_window(self, micro_model):
        frames = _frames(4)
        track = ensemble_sequence(micro_model, frames, clip_len=4)
        soft, _ = predict_window(micro_model, frames)
        assert np.allclose(track.soft, soft, atol=1e-6)
        assert (track.counts == 1).all()

    def test_contribution_counts(self, micro_model):
        track = ensemble_sequence(micro_model, _frames(5), clip_len=4)
        assert list(track.counts) == [1, 2, 2, 2, 1]

    def test_constant_prediction_model_idempotent(self, micro_model, monkeypatch):
        constant = np.full((4, 32, 64), 0.37, dtype=np.float32)

        def fake_predict(model, frames, cfg=None):
            return constant.copy(), np.ones(4, bool)

        monkeypatch.setattr(inference, "predict_window", fake_predict)
        track = inference.ensemble_sequence(micro_model, _frames(6), clip_len=4)
        assert np.allclose(track.soft, 0.37, atol=1e-6)

    def test_short_sequence_padded(self, micro_model, caplog):
        import logging

        with caplog.at_level(logging.WARNING, logger="slotflow.inference"):
            track = ensemble_sequence(micro_model, _frames(2), clip_len=4)
        assert track.soft.shape[0] == 2
        assert (track.counts >= 1).all()
        assert any("padding" in r.message for r in caplog.records)

    def test_binary_is_thresholded_soft(self, micro_model):
        track = ensemble_sequence(micro_model, _frames(4), clip_len=4,
                                  cfg=InferenceConfig(threshold=0.4))
        assert np.array_equal(track.binary, track.soft >= 0.4)
        assert set(np.unique(track.binary)) <= {False, True}


def _track_from(mask_list):
    soft = np.stack([m.astype(np.float32) for m in mask_list])
    return MaskTrack(soft=soft, binary=soft >= 0.5, counts=np.ones(len(mask_list), dtype=np.int64))


class TestEvaluate:
    def test_perfect_predictions(self, rng):
        masks = [rng.random((8, 8)) > 0.5 for _ in range(3)]
        gt = {"seq": {i: m.astype(np.uint8) for i, m in enumerate(masks)}}
        report = evaluate(gt, {"seq": _track_from(masks)})
        assert report.sequences["seq"].mean == 1.0
        assert report.frame_average == 1.0

    def test_sparse_annotations_scored_only(self, rng):
        masks = [rng.random((8, 8)) > 0.5 for _ in range(21)]
        gt = {"seq": {0: masks[0].astype(np.uint8), 20: masks[20].astype(np.uint8)}}
        report = evaluate(gt, {"seq": _track_from(masks)})
        assert sorted(report.sequences["seq"].per_frame) == [0, 20]

    def test_multi_object_labels_merged(self):
        pred = np.zeros((4, 4))
        pred[:2] = 1.0
        labels = np.zeros((4, 4), dtype=np.int32)
        labels[0] = 1
        labels[1] = 2
        report = evaluate({"s": {0: labels}}, {"s": _track_from([pred])})
        assert report.sequences["s"].per_frame[0] == 1.0

    def test_frame_weighted_mean(self):
        report = EvalReport({
            "a": SequenceScores({0: 1.0, 1: 0.0}),
            "b": SequenceScores({0: 0.5}),
        })
        assert report.frame_average == pytest.approx(np.mean([1.0, 0.0, 0.5]))
        assert report.total_frames == 3

    def test_no_annotations_rejected(self):
        with pytest.raises(ValueError, match="no annotated frames"):
            evaluate({}, {})

    def test_table_structure(self):
        report = EvalReport({f"seq{i:02d}": SequenceScores({0: 0.5}) for i in range(20)})
        table = report.format_table()
        lines = table.splitlines()
        import re

        assert len([l for l in lines if re.match(r"^seq\d\d\s", l)]) == 20
        assert lines[-1].startswith("frame avg.")

    def test_csv_round_trip(self, tmp_path):
        report = EvalReport({"x": SequenceScores({0: 0.25, 1: 0.75})})
        report.write_csv(tmp_path / "eval.csv")
        rows = (tmp_path / "eval.csv").read_text().strip().splitlines()
        assert rows[0] == "sequence,frames,j_mean"
        assert rows[1].startswith("x,2,0.5")
        assert rows[-1].startswith("frame avg.,2,")


def test_write_mask_track_round_trip(tmp_path, rng):
    from slotflow import dataio

    track = _track_from([rng.random((8, 8)) > 0.5 for _ in range(2)])
    inference.write_mask_track(track, tmp_path, save_soft=True)
    loaded = dataio.load_mask(tmp_path / "00000.png")
    assert np.array_equal(loaded, track.binary[0])
    assert (tmp_path / "00001_soft.png").exists()
