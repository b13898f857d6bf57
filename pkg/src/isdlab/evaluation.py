"""Detection post-processing (threshold + NMS) and VOC-style average precision."""
from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .detector import Annotation, DefaultBoxSet, PredictionGrid, cxcywh_to_xyxy, decode_offsets, iou_matrix


@dataclass(frozen=True)
class Detection:
    image_id: str
    class_id: int
    score: float
    box: tuple[float, float, float, float]


def iou(box_a, box_b) -> float:
    """IoU of two ``(xmin, ymin, xmax, ymax)`` boxes; zero-area boxes give 0."""
    return float(iou_matrix(np.asarray(box_a)[None], np.asarray(box_b)[None])[0, 0])


def nms(boxes, scores, iou_threshold: float = 0.45, labels=None) -> np.ndarray:
    """Greedy per-class suppression; returns kept indices in descending score order.

    Equal scores are visited in index order.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if not 0 < iou_threshold < 1:
        raise ValueError("iou_threshold must lie in (0, 1)")
    labels = np.zeros(len(scores), dtype=np.int64) if labels is None else np.asarray(labels)
    keep = []
    for c in np.unique(labels):
        idx = np.nonzero(labels == c)[0]
        idx = idx[np.argsort(-scores[idx], kind="stable")]
        over = iou_matrix(boxes[idx], boxes[idx]) > iou_threshold
        alive = np.ones(len(idx), dtype=bool)
        for i in range(len(idx)):
            if alive[i]:
                alive[i + 1:] &= ~over[i, i + 1:]
        keep.append(idx[alive])
    keep = np.concatenate(keep) if keep else np.zeros(0, dtype=np.int64)
    return keep[np.argsort(-scores[keep], kind="stable")].astype(np.int64)


def postprocess(grid: PredictionGrid, boxes: DefaultBoxSet, image_id: str = "",
                score_threshold: float = 0.01, nms_threshold: float = 0.45, top_k: int = 200) -> list[Detection]:
    """Decode one image's grid into at most ``top_k`` detections."""
    probs = grid.cls.detach().cpu().numpy().astype(np.float64)
    decoded = np.clip(cxcywh_to_xyxy(decode_offsets(grid.loc.detach().cpu().numpy(), boxes.boxes)), 0, 1)
    ks, cs = np.nonzero(probs[:, 1:] > score_threshold)
    if len(ks) == 0:
        return []
    scores = probs[ks, cs + 1]
    cand = decoded[ks]
    keep = nms(cand, scores, nms_threshold, labels=cs)[:top_k]
    return [Detection(image_id, int(cs[i]) + 1, float(scores[i]), tuple(float(v) for v in cand[i])) for i in keep]


def _match(detections: Sequence[Detection], ground_truth: Mapping[str, Annotation], class_id: int,
           iou_threshold: float):
    """Greedy VOC matching in score order; returns (tp flags with difficult hits dropped, #positives)."""
    dets = [d for d in detections if d.class_id == class_id]
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    gts, used, npos = {}, {}, 0
    for img, ann in ground_truth.items():
        sel = ann.labels == class_id
        gts[img] = (ann.boxes[sel], ann.difficult[sel])
        used[img] = np.zeros(int(sel.sum()), dtype=bool)
        npos += int((~ann.difficult[sel]).sum())
    tp = np.zeros(len(order), dtype=bool)
    ignore = np.zeros(len(order), dtype=bool)
    for rank, i in enumerate(order):
        d = dets[i]
        gt_boxes, gt_diff = gts.get(d.image_id, (np.zeros((0, 4)), np.zeros(0, dtype=bool)))
        if len(gt_boxes) == 0:
            continue
        ov = iou_matrix(np.asarray(d.box)[None], gt_boxes)[0]
        j = int(ov.argmax())
        if ov[j] >= iou_threshold:
            if gt_diff[j]:
                ignore[rank] = True
            elif not used[d.image_id][j]:
                tp[rank] = True
                used[d.image_id][j] = True
    return tp[~ignore], npos


def ap_from_matches(tp: np.ndarray, npos: int, use_11_point: bool = False) -> float:
    if npos == 0:
        return float("nan")
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / npos
    precision = ctp / (ctp + cfp)
    if use_11_point:
        return float(np.mean([precision[recall >= t].max() if np.any(recall >= t) else 0.0
                              for t in np.linspace(0, 1, 11)]))
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0] + 1
    return float(np.sum((mrec[idx] - mrec[idx - 1]) * mpre[idx]))


def average_precision(detections: Iterable[Detection], ground_truth: Mapping[str, Annotation],
                      num_classes: int, iou_threshold: float = 0.5, use_11_point: bool = False) -> dict:
    """Per-class AP and their mean; classes without ground truth are left out of the mean."""
    detections = list(detections)
    per_class = {}
    for c in range(1, num_classes + 1):
        tp, npos = _match(detections, ground_truth, c, iou_threshold)
        per_class[c] = ap_from_matches(tp, npos, use_11_point)
    valid = [v for v in per_class.values() if not np.isnan(v)]
    return {"ap": per_class, "map": float(np.mean(valid)) if valid else float("nan")}


def brute_force_ap(detections: Sequence[Detection], ground_truth: Mapping[str, Annotation], class_id: int,
                   iou_threshold: float = 0.5) -> float:
    """Reference all-point AP by enumerating every score cut-off.

    Each prefix is matched from scratch and precision/recall are kept as
    exact fractions; the interpolated precision at a recall level is the
    best precision at any cut-off reaching at least that recall.
    """
    dets = sorted((d for d in detections if d.class_id == class_id), key=lambda d: -d.score)
    npos = sum(int(((a.labels == class_id) & ~a.difficult).sum()) for a in ground_truth.values())
    if npos == 0:
        return float("nan")
    points = []
    for cut in range(1, len(dets) + 1):
        tp = fp = 0
        taken = set()
        for d in dets[:cut]:
            ann = ground_truth.get(d.image_id)
            best, best_j = -1.0, -1
            if ann is not None:
                for j in range(len(ann.labels)):
                    if ann.labels[j] != class_id:
                        continue
                    o = iou(d.box, ann.boxes[j])
                    if o > best:
                        best, best_j = o, j
            if best >= iou_threshold:
                if ann.difficult[best_j]:
                    continue
                if (d.image_id, best_j) not in taken:
                    taken.add((d.image_id, best_j))
                    tp += 1
                    continue
            fp += 1
        if tp + fp:
            points.append((Fraction(tp, npos), Fraction(tp, tp + fp)))
    levels = sorted({r for r, _ in points})
    total, prev = Fraction(0), Fraction(0)
    for r in levels:
        if r == 0:
            continue
        total += (r - prev) * max(p for rr, p in points if rr >= r)
        prev = r
    return float(total)


def coco_style_map(detections, ground_truth, num_classes: int, thresholds=np.arange(0.5, 0.96, 0.05)) -> float:
    """mAP averaged over IoU thresholds 0.5:0.95 (not tuned for official-tool parity)."""
    detections = list(detections)
    return float(np.mean([average_precision(detections, ground_truth, num_classes, t)["map"] for t in thresholds]))


def write_detections(path, detections: Iterable[Detection]) -> None:
    with open(path, "w") as fh:
        for d in detections:
            fh.write(json.dumps({"image_id": d.image_id, "class": d.class_id, "score": d.score,
                                 "box": list(d.box)}) + "\n")


def read_detections(path) -> list[Detection]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            row = json.loads(line)
            out.append(Detection(row["image_id"], int(row["class"]), float(row["score"]), tuple(row["box"])))
    return out
