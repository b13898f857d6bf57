import math

import numpy as np
import pytest
import torch

from isdlab.detector import (Annotation, ArchConfig, CheckpointError, ConfigError, PredictionGrid, ToyDetector,
                             build_default_boxes, cxcywh_to_xyxy, decode_offsets, decode_predictions,
                             encode_gt, encode_offsets, forward, iou_matrix, load_checkpoint, multibox_loss,
                             save_checkpoint)


class TestDefaultBoxes:
    def test_degenerate_grid(self):
        boxes = build_default_boxes([(1, 1)], [1.0], [1.0])
        np.testing.assert_array_equal(boxes.boxes, [[0.5, 0.5, 1.0, 1.0]])

    def test_deterministic(self):
        cfg = ([(4, 4), (2, 2)], [0.3, 0.6], [1.0, 2.0, 0.5])
        a, b = build_default_boxes(*cfg), build_default_boxes(*cfg)
        assert a.boxes.tobytes() == b.boxes.tobytes()
        assert a.levels == b.levels

    def test_two_by_two_centres(self):
        boxes = build_default_boxes([(2, 2)], [0.5], [1.0])
        centres = {tuple(b) for b in boxes.boxes[:, :2]}
        assert centres == {(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)}
        np.testing.assert_array_equal(boxes.boxes[:, 2:], 0.5)

    def test_count_and_invariants(self):
        boxes = build_default_boxes([(6, 5), (3, 3)], [0.2, 0.4], [1.0, 2.0])
        assert len(boxes) == 6 * 5 * 2 + 3 * 3 * 2
        assert np.all(boxes.boxes[:, 2:] > 0)
        assert np.all((boxes.boxes[:, :2] >= 0) & (boxes.boxes[:, :2] <= 1))

    def test_flat_index_bijection(self):
        boxes = build_default_boxes([(3, 4), (2, 1)], [0.3, 0.6], [1.0, 2.0, 0.5])
        seen = set()
        for p, (h, w, d) in enumerate(boxes.levels):
            for r in range(h):
                for c in range(w):
                    for i in range(d):
                        k = boxes.flat_index(p, r, c, i)
                        assert boxes.unravel(k) == (p, r, c, i)
                        seen.add(k)
        assert seen == set(range(len(boxes)))

    @pytest.mark.parametrize("args", [([], [], [1.0]), ([(2, 2)], [0.0], [1.0]), ([(2, 2)], [-0.3], [1.0]),
                                      ([(2, 2)], [1.2], [1.0])])
    def test_bad_config(self, args):
        with pytest.raises(ConfigError):
            build_default_boxes(*args)


class TestEncoding:
    def test_identity_encoding(self):
        boxes = build_default_boxes([(2, 2)], [0.5], [1.0])
        gt = Annotation([2], cxcywh_to_xyxy(boxes.boxes[1:2]))
        cls, loc, match = encode_gt(gt, boxes)
        assert match[1] and cls[1] == 2
        np.testing.assert_allclose(loc[1], 0.0, atol=1e-15)

    def test_empty_annotation(self):
        boxes = build_default_boxes([(2, 2)], [0.5], [1.0])
        cls, loc, match = encode_gt(Annotation(), boxes)
        assert not match.any() and not cls.any() and not loc.any()

    def test_log_two(self):
        t = encode_offsets(np.array([0.5, 0.5, 0.4, 0.4]), np.array([0.5, 0.5, 0.2, 0.2]))
        np.testing.assert_allclose(t, [0, 0, math.log(2), math.log(2)], rtol=0, atol=1e-15)

    def test_best_anchor_forced(self):
        # tiny GT overlaps nothing at 0.5 but still gets its best anchor
        boxes = build_default_boxes([(2, 2)], [0.5], [1.0])
        gt = Annotation([1], [[0.05, 0.05, 0.15, 0.15]])
        cls, _, match = encode_gt(gt, boxes, 0.5)
        assert match.sum() == 1 and match[0] and cls[0] == 1

    def test_threshold_matches_all_overlapping(self):
        boxes = build_default_boxes([(4, 4)], [0.3], [1.0, 2.0, 0.5])
        gt = Annotation([3], [[0.2, 0.2, 0.6, 0.6]])
        _, _, match = encode_gt(gt, boxes, 0.5)
        ious = iou_matrix(boxes.corners(), gt.boxes)[:, 0]
        assert set(np.nonzero(match)[0]) == set(np.nonzero(ious >= 0.5)[0]) | {int(ious.argmax())}


class TestDecoding:
    def test_zero_offsets(self):
        anchors = np.array([[0.3, 0.4, 0.2, 0.1]])
        np.testing.assert_array_equal(decode_offsets(np.zeros((1, 4)), anchors), anchors)

    def test_log_two_width(self):
        out = decode_offsets(np.array([0, 0, math.log(2), 0]), np.array([0.5, 0.5, 0.2, 0.2]))
        assert out[2] == pytest.approx(0.4, abs=1e-15)

    def test_round_trip(self, rng):
        for _ in range(200):
            anchor = np.r_[rng.uniform(0.1, 0.9, 2), rng.uniform(0.05, 0.5, 2)]
            gt = np.r_[rng.uniform(0.1, 0.9, 2), rng.uniform(0.05, 0.5, 2)]
            back = decode_offsets(encode_offsets(gt, anchor), anchor)
            np.testing.assert_allclose(back, gt, rtol=0, atol=1e-9)

    def test_decode_predictions_excludes_background_and_clips(self):
        boxes = build_default_boxes([(1, 2)], [0.5], [1.0])
        probs = torch.tensor([[0.9, 0.05, 0.05], [0.1, 0.2, 0.7]], dtype=torch.float64)
        loc = torch.tensor([[0, 0, 3.0, 3.0], [0, 0, 0, 0]], dtype=torch.float64)
        out = decode_predictions(PredictionGrid(probs, loc), boxes, score_threshold=0.0)
        assert {c for c, _, _ in out} == {1, 2}
        assert len(out) == 4
        for _, _, b in out:
            assert all(0.0 <= v <= 1.0 for v in b)


class TestModel:
    def test_rows_are_distributions(self, rng):
        model = ToyDetector(ArchConfig(image_size=32, channels=(8, 8, 8), head_stages=(1, 2), scales=(0.3, 0.6)))
        grid = forward(model, rng.uniform(0, 1, (3, 32, 32, 3)))
        assert grid.cls.shape == (3, len(model.default_boxes), 4)
        assert grid.loc.shape == (3, len(model.default_boxes), 4)
        torch.testing.assert_close(grid.cls.sum(-1), torch.ones(3, len(model.default_boxes)), atol=1e-6, rtol=0)
        assert (grid.cls >= 0).all()

    def test_duplicate_images_identical(self, rng):
        model = ToyDetector(ArchConfig(image_size=32, channels=(8, 8, 8), head_stages=(1, 2), scales=(0.3, 0.6)))
        img = rng.uniform(0, 1, (1, 32, 32, 3))
        grid = forward(model, np.concatenate([img, img]))
        assert torch.equal(grid.cls[0], grid.cls[1]) and torch.equal(grid.loc[0], grid.loc[1])
        again = forward(model, np.concatenate([img, img]))
        assert torch.equal(grid.cls, again.cls)

    def test_flipped_input_same_shape(self, rng):
        model = ToyDetector(ArchConfig(image_size=32, channels=(8, 8, 8), head_stages=(1, 2), scales=(0.3, 0.6)))
        img = rng.uniform(0, 1, (2, 32, 32, 3))
        a, b = forward(model, img), forward(model, img[:, :, ::-1].copy())
        assert a.cls.shape == b.cls.shape and a.loc.shape == b.loc.shape

    def test_shape_mismatch(self):
        model = ToyDetector(ArchConfig(image_size=32, channels=(8, 8, 8), head_stages=(1, 2), scales=(0.3, 0.6)))
        with pytest.raises(ValueError):
            model(torch.zeros(1, 16, 16, 3))

    def test_tiny_parameter_budget(self, tiny_model):
        assert sum(p.numel() for p in tiny_model.parameters()) <= 500


class TestMultiboxLoss:
    def _setup(self):
        boxes = build_default_boxes([(2, 2)], [0.5], [1.0])
        ann = Annotation([1], cxcywh_to_xyxy(boxes.boxes[0:1]))
        return boxes, encode_gt(ann, boxes)

    def test_perfect_prediction_zero(self):
        boxes, (cls, loc, match) = self._setup()
        probs = torch.nn.functional.one_hot(torch.as_tensor(cls), 3).double()
        grid = PredictionGrid(probs, torch.as_tensor(loc))
        assert float(multibox_loss(grid, cls, loc, match)) == 0.0

    def test_no_positives_zero_loc(self, rng):
        boxes = build_default_boxes([(2, 2)], [0.5], [1.0])
        cls, loc, match = encode_gt(Annotation(), boxes)
        grid = PredictionGrid.from_probs(np.full((4, 3), 1 / 3), rng.normal(size=(4, 4)))
        total, c, l = multibox_loss(grid, cls, loc, match, return_parts=True)
        assert float(l) == 0.0
        # one mined negative: -ln(1/3)
        assert float(c) == pytest.approx(math.log(3), abs=1e-12)

    def test_half_probability(self):
        boxes, (cls, loc, match) = self._setup()
        probs = np.tile([1.0, 0.0, 0.0], (4, 1))
        probs[0] = [0.25, 0.5, 0.25]
        grid = PredictionGrid.from_probs(probs, loc)
        total, c, l = multibox_loss(grid, cls, loc, match, return_parts=True)
        # positive contributes -ln 0.5; mined negatives are exact
        assert float(c) == pytest.approx(-math.log(0.5), abs=1e-6)
        assert float(l) == 0.0

    def test_hard_negative_count(self):
        boxes = build_default_boxes([(4, 4)], [0.25], [1.0])
        ann = Annotation([1], cxcywh_to_xyxy(boxes.boxes[5:6]))
        cls, loc, match = encode_gt(ann, boxes)
        n_pos = int(match.sum())
        # negatives with distinct background probabilities; the hardest 3*n_pos are counted
        bg = np.linspace(0.05, 0.95, len(boxes))
        probs = np.stack([bg, 1 - bg, np.zeros_like(bg)], 1)
        probs[match] = [0, 1, 0]
        grid = PredictionGrid.from_probs(probs, loc)
        _, c, _ = multibox_loss(grid, cls, loc, match, neg_pos_ratio=3, return_parts=True)
        neg_losses = np.sort(-np.log(bg[~match]))[::-1][:3 * n_pos]
        assert float(c) == pytest.approx(neg_losses.sum() / n_pos, rel=1e-9)

    def test_non_negative(self, rng):
        boxes = build_default_boxes([(3, 3)], [0.4], [1.0, 2.0])
        for _ in range(20):
            ann = Annotation([1], [[0.1, 0.2, 0.5, 0.6]])
            cls, loc, match = encode_gt(ann, boxes)
            logits = torch.as_tensor(rng.normal(size=(len(boxes), 3)))
            grid = PredictionGrid(logits.softmax(-1), torch.as_tensor(rng.normal(size=(len(boxes), 4))),
                                  logits.log_softmax(-1))
            assert float(multibox_loss(grid, cls, loc, match)) >= 0


class TestCheckpoint:
    def test_round_trip(self, tmp_path, tiny_model, rng):
        path = tmp_path / "m.pt"
        save_checkpoint(path, tiny_model, {"note": 1})
        model, extra = load_checkpoint(path)
        assert extra == {"note": 1}
        assert torch.equal(model.parameter_vector(), tiny_model.parameter_vector())
        x = rng.uniform(0, 1, (2, 8, 8, 3))
        assert torch.equal(forward(model, x).cls, forward(tiny_model, x).cls)

    def test_version_mismatch(self, tmp_path, tiny_model):
        path = tmp_path / "m.pt"
        save_checkpoint(path, tiny_model)
        payload = torch.load(path, weights_only=False)
        payload["format_version"] = 999
        torch.save(payload, path)
        with pytest.raises(CheckpointError):
            load_checkpoint(path)
