"""Miss-rate / false-positives-per-image scoring with ignore regions.

Matching is greedy in descending score order: a detection claims the
highest-overlap unmatched non-ignore ground-truth box above the IoU
threshold; failing that it may overlap an ignore region (neutral, ignore
matches are not exclusive); otherwise it is a false positive. Because a
detection's outcome never depends on lower-scored detections, one matching
pass per image yields the whole threshold sweep.

The summary number is the log-average miss rate: miss rates sampled at nine
log-spaced FPPI references spanning two decades up to 1, combined by
geometric mean.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .boxes import Detection, iou_matrix


class EvalError(ValueError):
    """Scoring is undefined for the given inputs."""


@dataclass
class GTBox:
    x1: float
    y1: float
    x2: float
    y2: float
    visibility: float = 1.0
    ignore: bool = False

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2])


@dataclass
class EvalCurve:
    """Threshold sweep: (fppi, miss_rate) points ordered by descending
    score threshold, so fppi never decreases along the curve."""

    points: list = field(default_factory=list)
    thresholds: list = field(default_factory=list)
    log_avg_mr: float = 1.0


# Caltech-style subset predicates, with pixel heights rescaled for scenes
# shot at 1/4 of the benchmark's native resolution.
SUBSET_SCALE = 4.0
_REASONABLE_MIN_H = 50.0
_SMALL_MIN_H = 50.0
_SMALL_MAX_H = 75.0
_REASONABLE_MIN_VIS = 0.65
_SMALL_MIN_VIS = 0.20
_SMALL_MAX_VIS = 0.65

SUBSETS = ("reasonable", "small")


def subset_member(gt: GTBox, subset: str, scale: float = SUBSET_SCALE) -> bool:
    if subset == "reasonable":
        return gt.height > _REASONABLE_MIN_H / scale and gt.visibility > _REASONABLE_MIN_VIS
    if subset == "small":
        return (
            _SMALL_MIN_H / scale < gt.height < _SMALL_MAX_H / scale
            and _SMALL_MIN_VIS < gt.visibility < _SMALL_MAX_VIS
        )
    raise EvalError(f"unknown subset {subset!r}")


def subset_filter(gts: list[GTBox], subset: str, scale: float = SUBSET_SCALE) -> list[GTBox]:
    """Mark boxes outside the subset as ignore regions (never dropped:
    detections on them count neither as hits nor as false positives)."""
    if subset not in SUBSETS:
        raise EvalError(f"unknown subset {subset!r}")
    return [
        replace(gt, ignore=gt.ignore or not subset_member(gt, subset, scale)) for gt in gts
    ]


def match_detections(dets: list[Detection], gts: list[GTBox], iou_thresh: float = 0.5):
    """Greedy one-pass matching for a single image.

    Returns (outcomes, gt_matched): per detection a pair (kind, gt_index)
    with kind in {"tp", "fp", "ignore"}, ordered like the input; per
    ground-truth box whether some detection claimed it. Score ties are
    visited in input order (stable sort).
    """
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    gt_arr = np.array([[g.x1, g.y1, g.x2, g.y2] for g in gts]).reshape(-1, 4)
    det_arr = np.array([[d.x1, d.y1, d.x2, d.y2] for d in dets]).reshape(-1, 4)
    ious = iou_matrix(det_arr, gt_arr) if len(dets) and len(gts) else np.zeros((len(dets), len(gts)))

    outcomes: list = [None] * len(dets)
    gt_matched = [False] * len(gts)
    for i in order:
        best_j = -1
        best_iou = -1.0
        for j, g in enumerate(gts):
            if g.ignore or gt_matched[j]:
                continue
            v = ious[i, j]
            if v >= iou_thresh and v > best_iou:
                best_iou = v
                best_j = j
        if best_j >= 0:
            gt_matched[best_j] = True
            outcomes[i] = ("tp", best_j)
            continue
        hit_ignore = any(
            g.ignore and ious[i, j] >= iou_thresh for j, g in enumerate(gts)
        )
        outcomes[i] = (("ignore", None) if hit_ignore else ("fp", None))
    return outcomes, gt_matched


def mr_fppi_curve(image_results, num_images: int | None = None,
                  iou_thresh: float = 0.5) -> EvalCurve:
    """Score sweep over a whole image set.

    ``image_results`` is a sequence of (detections, ground_truths) pairs, one
    per image. Produces one curve point per distinct detection score; with no
    detections at all the curve is the single point (0, 1).
    """
    image_results = list(image_results)
    if num_images is None:
        num_images = len(image_results)
    if num_images <= 0:
        raise EvalError("num_images must be positive")

    total_gt = sum(sum(0 if g.ignore else 1 for g in gts) for _, gts in image_results)
    if total_gt == 0:
        raise EvalError("no non-ignore ground truth; miss rate undefined")

    tp_scores: list[float] = []
    fp_scores: list[float] = []
    for dets, gts in image_results:
        outcomes, _ = match_detections(dets, gts, iou_thresh=iou_thresh)
        for det, (kind, _) in zip(dets, outcomes):
            if kind == "tp":
                tp_scores.append(det.score)
            elif kind == "fp":
                fp_scores.append(det.score)

    all_scores = sorted(
        {d.score for dets, _ in image_results for d in dets}, reverse=True
    )
    if not all_scores:
        return EvalCurve(points=[(0.0, 1.0)], thresholds=[float("inf")], log_avg_mr=1.0)

    tp_arr = np.sort(np.asarray(tp_scores))
    fp_arr = np.sort(np.asarray(fp_scores))
    points = []
    for t in all_scores:
        tp = len(tp_arr) - np.searchsorted(tp_arr, t, side="left")
        fp = len(fp_arr) - np.searchsorted(fp_arr, t, side="left")
        fppi = fp / num_images
        miss = (total_gt - tp) / total_gt
        points.append((float(fppi), float(miss)))

    curve = EvalCurve(points=points, thresholds=[float(t) for t in all_scores])
    curve.log_avg_mr = log_average_miss_rate(curve)
    return curve


_MR_EPS = 1e-10
_N_REFERENCES = 9


def log_average_miss_rate(curve: EvalCurve) -> float:
    """Geometric mean of miss rates sampled at 9 log-spaced FPPI references
    in [1e-2, 1]. Each reference takes the last curve point with fppi <= ref
    (the curve's first miss rate if there is none). An all-zero sample set
    gives exactly 0."""
    if not curve.points:
        raise EvalError("empty curve")
    refs = np.logspace(-2.0, 0.0, _N_REFERENCES)
    fppis = np.array([p[0] for p in curve.points])
    misses = np.array([p[1] for p in curve.points])
    sampled = []
    for ref in refs:
        idx = np.where(fppis <= ref)[0]
        sampled.append(misses[idx[-1]] if len(idx) else misses[0])
    sampled = np.asarray(sampled)
    if np.all(sampled == 0.0):
        return 0.0
    return float(np.exp(np.mean(np.log(np.maximum(sampled, _MR_EPS)))))


def evaluate(dets_by_image: dict, gts_by_image: dict, subset: str,
             scale: float = SUBSET_SCALE, iou_thresh: float = 0.5) -> EvalCurve:
    """Subset-filtered curve over the union of image ids in both maps."""
    ids = sorted(set(dets_by_image) | set(gts_by_image))
    results = [
        (
            dets_by_image.get(i, []),
            subset_filter(gts_by_image.get(i, []), subset, scale),
        )
        for i in ids
    ]
    return mr_fppi_curve(results, num_images=len(ids), iou_thresh=iou_thresh)


# ---- text file formats ------------------------------------------------------


def _data_lines(path):
    with open(path) as fh:
        for ln, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            yield ln, line.split()


def read_detections(path) -> dict[int, list[Detection]]:
    """Lines of `image_id x1 y1 x2 y2 score`."""
    out: dict[int, list[Detection]] = {}
    for ln, parts in _data_lines(path):
        if len(parts) != 6:
            raise EvalError(f"{path}:{ln}: expected 6 fields, got {len(parts)}")
        img = int(parts[0])
        out.setdefault(img, []).append(Detection(*(float(v) for v in parts[1:])))
    return out


def write_detections(path, dets_by_image: dict):
    with open(path, "w") as fh:
        fh.write("# image_id x1 y1 x2 y2 score\n")
        for img in sorted(dets_by_image):
            for d in dets_by_image[img]:
                fh.write(f"{img} {float(d.x1)!r} {float(d.y1)!r} {float(d.x2)!r} {float(d.y2)!r} {float(d.score)!r}\n")


def read_ground_truth(path) -> dict[int, list[GTBox]]:
    """Lines of `image_id x1 y1 x2 y2 visibility`."""
    out: dict[int, list[GTBox]] = {}
    for ln, parts in _data_lines(path):
        if len(parts) != 6:
            raise EvalError(f"{path}:{ln}: expected 6 fields, got {len(parts)}")
        img = int(parts[0])
        out.setdefault(img, []).append(
            GTBox(*(float(v) for v in parts[1:5]), visibility=float(parts[5]))
        )
    return out


def write_ground_truth(path, gts_by_image: dict):
    with open(path, "w") as fh:
        fh.write("# image_id x1 y1 x2 y2 visibility\n")
        for img in sorted(gts_by_image):
            for g in gts_by_image[img]:
                fh.write(f"{img} {float(g.x1)!r} {float(g.y1)!r} {float(g.x2)!r} {float(g.y2)!r} {float(g.visibility)!r}\n")


def write_curve(path, curve: EvalCurve):
    with open(path, "w") as fh:
        fh.write("fppi\tmiss_rate\n")
        for fppi, miss in curve.points:
            fh.write(f"{fppi!r}\t{miss!r}\n")
        fh.write(f"# log_avg_mr = {curve.log_avg_mr!r}\n")
