"""Joint selection, flip test, OKS and single-instance AP/AR."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import KeypointInstance, normalize_image
from .matching import PredictionSet, match
from .skeleton import skeleton_for

OKS_THRESHOLDS = np.round(np.arange(0.5, 0.951, 0.05), 2)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


class EvaluationError(ValueError):
    pass


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def select_joints(logits: np.ndarray, coords: np.ndarray, rule: str = "filtered"):
    """Pick one query per joint class from ``(M, K+1)`` logits and ``(M, 2)`` coords.

    ``filtered``: highest class-k probability among queries whose argmax is k,
    falling back to all queries. ``max``: highest class-k probability overall.
    Returns ``(K, 2)`` coordinates and ``(K,)`` confidences.
    """
    prob = _softmax(np.asarray(logits, dtype=np.float64))
    k = prob.shape[1] - 1
    top = prob.argmax(axis=1)
    xy = np.zeros((k, 2))
    conf = np.zeros(k)
    for c in range(k):
        cand = np.flatnonzero(top == c) if rule == "filtered" else np.array([], dtype=int)
        if rule not in ("filtered", "max"):
            raise ValueError(f"unknown selection rule {rule!r}")
        if len(cand) == 0:
            cand = np.arange(len(prob))
        q = cand[np.argmax(prob[cand, c])]
        xy[c] = coords[q]
        conf[c] = prob[q, c]
    return xy, conf


def predict_joints(model, crops, flip_test: bool = True, flip_map=None, rule: str = "filtered"):
    """Per-class joints for one ``(H, W, 3)`` crop or a batch ``(B, H, W, 3)``.

    ``model.predict(images)`` must return numpy ``(B, M, K+1)`` logits and
    ``(B, M, 2)`` coordinates. With ``flip_test`` the mirrored crop is also
    run; its joints are un-mirrored (x -> 1 - x), mapped back through the
    left/right flip map and averaged with the direct prediction.
    """
    crops = np.asarray(crops)
    single = crops.ndim == 3
    if single:
        crops = crops[None]
    logits, coords = model.predict(crops)
    picks = [select_joints(l, c, rule) for l, c in zip(logits, coords)]
    xy = np.stack([p[0] for p in picks])
    conf = np.stack([p[1] for p in picks])
    if flip_test:
        k = xy.shape[1]
        flip_map = np.asarray(flip_map if flip_map is not None else skeleton_for(k).flip_map)
        f_logits, f_coords = model.predict(np.ascontiguousarray(crops[:, :, ::-1]))
        f_picks = [select_joints(l, c, rule) for l, c in zip(f_logits, f_coords)]
        f_xy = np.stack([p[0] for p in f_picks])[:, flip_map]
        f_xy[..., 0] = 1.0 - f_xy[..., 0]
        f_conf = np.stack([p[1] for p in f_picks])[:, flip_map]
        xy = (xy + f_xy) / 2.0
        conf = (conf + f_conf) / 2.0
    return (xy[0], conf[0]) if single else (xy, conf)


def oks(pred_xy, gt: KeypointInstance, sigmas, scale=(1.0, 1.0)) -> float:
    """Object keypoint similarity over labeled joints.

    ``scale`` converts coordinate units into the units of ``gt.area``
    (e.g. the crop ``(W, H)`` when coordinates are crop-normalized and the
    area is in crop pixels).
    """
    labeled = gt.visibility > 0
    if not labeled.any():
        raise EvaluationError("OKS needs at least one labeled joint")
    diff = (np.asarray(pred_xy, dtype=np.float64) - gt.xy) * np.asarray(scale, dtype=np.float64)
    d2 = (diff ** 2).sum(axis=1)
    k2 = (2.0 * np.asarray(sigmas, dtype=np.float64)) ** 2
    e = np.exp(-d2 / (2.0 * gt.area * k2))
    return float(e[labeled].mean())


@dataclass
class EvalMetrics:
    ap: float
    ar: float
    ap_per_threshold: dict[float, float] = field(default_factory=dict)
    ar_per_threshold: dict[float, float] = field(default_factory=dict)
    mean_l1: float = 0.0
    num_samples: int = 0
    oks: list[float] = field(default_factory=list)

    def report(self) -> str:
        lines = [f"AP = {self.ap!r}", f"AR = {self.ar!r}", f"mean_l1 = {self.mean_l1!r}",
                 f"num_samples = {self.num_samples}"]
        for t, v in self.ap_per_threshold.items():
            lines.append(f"AP@{t:.2f} = {v!r}")
        for t, v in self.ar_per_threshold.items():
            lines.append(f"AR@{t:.2f} = {v!r}")
        return "\n".join(lines) + "\n"


def average_precision(scores, matched) -> float:
    """101-point interpolated AP for one threshold, one ground truth per sample."""
    matched = np.asarray(matched, dtype=bool)
    n = len(matched)
    if n == 0:
        return 0.0
    tp = np.cumsum(matched)
    precision = tp / np.arange(1, n + 1)
    recall = tp / n
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    valid = idx < n
    return float(np.where(valid, envelope[np.minimum(idx, n - 1)], 0.0).mean())


def evaluate_predictions(pred_xy: Sequence[np.ndarray], scores: Sequence[float],
                         gts: Sequence[KeypointInstance], sigmas, scale=(1.0, 1.0)) -> EvalMetrics:
    """AP/AR over OKS thresholds 0.50:0.05:0.95 with one prediction per crop."""
    if len(gts) == 0:
        raise EvaluationError("empty dataset")
    values = np.array([oks(p, g, sigmas, scale) for p, g in zip(pred_xy, gts)])
    scores = np.asarray(scores, dtype=np.float64)
    ids = np.array([g.image_id for g in gts])
    # ties in score are ordered by sample id so the result ignores dataset order
    order = np.lexsort((np.arange(len(gts)), ids, -scores))
    ap_t, ar_t = {}, {}
    for t in OKS_THRESHOLDS:
        hit = values[order] >= t
        ap_t[float(t)] = average_precision(scores[order], hit)
        ar_t[float(t)] = float(hit.mean())
    l1 = [np.abs(np.asarray(p) - g.xy)[g.visibility > 0].sum(axis=1) for p, g in zip(pred_xy, gts)]
    return EvalMetrics(
        ap=float(np.mean(list(ap_t.values()))),
        ar=float(np.mean(list(ar_t.values()))),
        ap_per_threshold=ap_t, ar_per_threshold=ar_t,
        mean_l1=float(np.concatenate(l1).mean()),
        num_samples=len(gts), oks=values.tolist(),
    )


def evaluate(model, dataset, flip_test: bool = True, sigmas=None, flip_map=None,
             rule: str = "filtered", batch_size: int = 32) -> EvalMetrics:
    """Evaluate a model on ``(crop, instance)`` pairs with crop-normalized keypoints.

    Crops may be uint8 (standardized here) or standardized floats. OKS uses
    crop-pixel distances against ``instance.area`` in crop pixels. The
    confidence ranking score is the mean class probability of the selected
    queries.
    """
    dataset = list(dataset)
    if not dataset:
        raise EvaluationError("empty dataset")
    k = dataset[0][1].num_joints
    sigmas = skeleton_for(k).sigmas if sigmas is None else sigmas
    dtype = getattr(model, "dtype", np.float64)
    preds, scores = [], []
    for start in range(0, len(dataset), batch_size):
        chunk = dataset[start:start + batch_size]
        imgs = np.stack([normalize_image(im) if np.asarray(im).dtype == np.uint8 else im
                         for im, _ in chunk]).astype(dtype)
        xy, conf = predict_joints(model, imgs, flip_test, flip_map, rule)
        preds.extend(xy)
        scores.extend(conf.mean(axis=1))
    h, w = np.asarray(dataset[0][0]).shape[:2]
    return evaluate_predictions(preds, scores, [inst for _, inst in dataset], sigmas, (w, h))


@dataclass
class MatchedFit:
    """Training-set fit under the same bipartite matching the loss uses."""

    mean_l1: float        # mean of |dx| + |dy| over matched labeled joints
    class_accuracy: float  # fraction of matched queries whose argmax is the joint's class
    num_joints: int

    def report(self) -> str:
        return (f"matched_l1 = {self.mean_l1!r}\nmatched_class_accuracy = {self.class_accuracy!r}\n"
                f"matched_joints = {self.num_joints}\n")


def matched_fit(model, dataset, l1_weight: float = 5.0, batch_size: int = 32) -> MatchedFit:
    """Match every sample's queries to its labeled joints and score the matched pairs."""
    dataset = list(dataset)
    if not dataset:
        raise EvaluationError("empty dataset")
    dtype = getattr(model, "dtype", np.float64)
    errors, hits = [], []
    for start in range(0, len(dataset), batch_size):
        chunk = dataset[start:start + batch_size]
        imgs = np.stack([normalize_image(im) if np.asarray(im).dtype == np.uint8 else im
                         for im, _ in chunk]).astype(dtype)
        logits, coords = model.predict(imgs)
        for lg, cd, (_, inst) in zip(logits, coords, chunk):
            lg, cd = np.asarray(lg, dtype=np.float64), np.asarray(cd, dtype=np.float64)
            classes, xy = inst.labeled()
            asg = match(PredictionSet(lg, cd), inst, l1_weight)
            for g, q in asg.pairs:
                errors.append(np.abs(cd[q] - xy[g]).sum())
                hits.append(lg[q].argmax() == classes[g])
    if not errors:
        raise EvaluationError("no labeled joints to match")
    return MatchedFit(float(np.mean(errors)), float(np.mean(hits)), len(errors))


class OracleModel:
    """Stub predictor that returns ground truth: query k carries joint k with certainty.

    Images are looked up by content, so it answers for the dataset it was
    built from (and its mirror images).
    """

    def __init__(self, dataset, num_queries: int | None = None, flip_map=None):
        dataset = list(dataset)
        self.k = dataset[0][1].num_joints
        self.m = num_queries or self.k
        self.flip_map = np.asarray(flip_map if flip_map is not None else skeleton_for(self.k).flip_map)
        self._table = {}
        for image, inst in dataset:
            img = normalize_image(image) if np.asarray(image).dtype == np.uint8 else np.asarray(image)
            self._table[self._key(img)] = inst.xy.copy()
            mirrored = np.empty_like(inst.xy)
            mirrored[self.flip_map] = np.column_stack([1.0 - inst.xy[:, 0], inst.xy[:, 1]])
            self._table.setdefault(self._key(img[:, ::-1]), mirrored)

    @staticmethod
    def _key(img) -> bytes:
        return np.ascontiguousarray(np.asarray(img, dtype=np.float32)).tobytes()

    def predict(self, images):
        images = np.asarray(images)
        b = len(images)
        logits = np.full((b, self.m, self.k + 1), -50.0)
        coords = np.full((b, self.m, 2), 0.5)
        for s, img in enumerate(images):
            xy = self._table[self._key(img)]
            for q in range(self.m):
                if q < self.k:
                    logits[s, q, q] = 50.0
                    coords[s, q] = xy[q]
                else:
                    logits[s, q, self.k] = 50.0
        return logits, coords
