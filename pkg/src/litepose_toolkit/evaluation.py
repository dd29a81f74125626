"""
Object Keypoint Similarity and COCO-style average precision.

    OKS = sum_i exp(-d_i^2 / (2 s^2 k_i^2)) * [v_i > 0] / sum_i [v_i > 0]

with d_i the distance between predicted and ground-truth joint i, s the
object scale (square root of the ground-truth area) and k_i the per-joint
falloff constant. AP is the 101-point interpolated precision averaged over
OKS thresholds 0.50, 0.55, ..., 0.95.

Crowd and ignore regions are not supported.
"""

import functools
import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Mapping, Sequence

import numpy as np

from .decode import KeypointSet, Person, keypoint_set_from_coco
from .errors import ArchFormatError, OksError

logger = logging.getLogger(__name__)

OKS_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
OKS_TABLES = {'coco': 'oks_coco.json', 'crowdpose': 'oks_crowdpose.json'}


@dataclass(frozen=True, slots=True)
class OksParams:
    scale: float
    """ Object scale s in pixels (square root of the object area). """
    k: tuple[float, ...]
    """ Per-joint falloff constants, one per joint. """

    def __post_init__(self):
        if not self.scale > 0:
            raise OksError(f'{self.scale}: object scale must be positive')
        if not self.k or any(not ki > 0 for ki in self.k):
            raise OksError(f'{list(self.k)}: falloff constants must be positive')

    @classmethod
    def from_area(cls, area: float, k: Sequence[float]) -> 'OksParams':
        return cls(math.sqrt(area) if area > 0 else 0.0, tuple(k))


@functools.lru_cache(maxsize=None)
def oks_table(name: str) -> tuple[float, ...]:
    """ k_i = 2 * sigma_i from the shipped sigma table `name` ('coco' or 'crowdpose'). """
    try:
        filename = OKS_TABLES[name]
    except KeyError:
        raise OksError(f'{name}: unknown OKS table. Expected one of {sorted(OKS_TABLES)}') from None
    with resources.files(__package__).joinpath('data', filename).open('r', encoding='utf-8') as f:
        data = json.load(f)
    return tuple(2.0 * s for s in data['sigmas'])


def uniform_k(num_joints: int, value: float = 0.1) -> tuple[float, ...]:
    return (value,) * num_joints


def oks(gt: Person, pred: Person, params: OksParams) -> float:
    g = gt.as_array()
    p = pred.as_array()
    if g.shape != p.shape or len(params.k) != len(g):
        raise OksError(f'{len(g)} gt joints, {len(p)} predicted, {len(params.k)} constants: counts differ')

    visible = g[:, 2] > 0
    if not visible.any():
        raise OksError('ground truth has no visible joints')

    d2 = np.sum((p[:, :2] - g[:, :2]) ** 2, axis=1)
    k = np.asarray(params.k, dtype=np.float64)
    e = np.exp(-d2 / (2.0 * params.scale ** 2 * k ** 2))
    return float(np.sum(e[visible]) / np.count_nonzero(visible))


@dataclass(frozen=True, slots=True)
class GroundTruth:
    persons: KeypointSet
    areas: tuple[float, ...]
    """ Object area per person, in the same pixel units as the keypoints. """

    def __post_init__(self):
        if len(self.areas) != len(self.persons):
            raise OksError(f'{len(self.areas)} areas for {len(self.persons)} persons')
        for index, (person, area) in enumerate(zip(self.persons.persons, self.areas)):
            if person.num_visible > 0 and not area > 0:
                raise OksError(f'{area}: person {index} has visible joints but no positive area')


@dataclass(frozen=True, slots=True)
class ImageEval:
    image_id: int
    gt: GroundTruth
    predictions: KeypointSet


@dataclass(frozen=True, slots=True)
class Match:
    gt_index: int
    pred_index: int
    oks: float


def oks_matrix(image: ImageEval, k: Sequence[float]) -> np.ndarray:
    """ [num_gt, num_pred] OKS; rows of gt persons without visible joints are -1. """
    gts = image.gt.persons.persons
    preds = image.predictions.persons
    out = np.full((len(gts), len(preds)), -1.0)
    for gi, (gt, area) in enumerate(zip(gts, image.gt.areas)):
        if gt.num_visible == 0:
            continue
        params = OksParams.from_area(area, k)
        for pi, pred in enumerate(preds):
            out[gi, pi] = oks(gt, pred, params)
    return out


def match_image(image: ImageEval, k: Sequence[float], threshold: float,
                ious: np.ndarray | None = None) -> list[Match]:
    """
    Greedy one-to-one matching: predictions by descending score, each to the
    unmatched ground truth of highest OKS, provided that OKS >= `threshold`.
    """
    if ious is None:
        ious = oks_matrix(image, k)
    scores = np.array([p.score for p in image.predictions.persons], dtype=np.float64)
    order = np.argsort(-scores, kind='mergesort')

    taken = set()
    matches = []
    for pi in order.tolist():
        best, best_oks = None, threshold
        for gi in range(ious.shape[0]):
            if gi in taken or ious[gi, pi] < threshold:
                continue
            if best is None or ious[gi, pi] > best_oks:
                best, best_oks = gi, ious[gi, pi]
        if best is not None:
            taken.add(best)
            matches.append(Match(best, pi, float(best_oks)))
    return matches


@dataclass(slots=True)
class EvalResult:
    ap: float
    ap50: float
    ap75: float
    per_threshold: dict[float, float] = field(default_factory=dict)
    pr_table: list[tuple[float, float, float]] = field(default_factory=list)
    """ (threshold, recall, interpolated precision) rows. """

    def summary(self) -> dict:
        return {
            'ap': round(self.ap, 4),
            'ap50': round(self.ap50, 4),
            'ap75': round(self.ap75, 4),
            'per_threshold': {f'{t:.2f}': round(v, 4) for t, v in self.per_threshold.items()},
        }


def _interpolated_precision(tp: np.ndarray, num_gt: int) -> np.ndarray:
    nd = len(tp)
    q = np.zeros(len(RECALL_POINTS))
    if nd == 0 or num_gt == 0:
        return q

    tp_sum = np.cumsum(tp).astype(np.float64)
    fp_sum = np.cumsum(~tp).astype(np.float64)
    rc = tp_sum / num_gt
    pr = tp_sum / (tp_sum + fp_sum + np.spacing(1))
    # precision envelope, non-increasing in recall
    pr = np.maximum.accumulate(pr[::-1])[::-1]

    inds = np.searchsorted(rc, RECALL_POINTS, side='left')
    valid = inds < nd
    q[valid] = pr[inds[valid]]
    return q


def evaluate_dataset(images: Iterable[ImageEval], k: Sequence[float],
                     thresholds: Sequence[float] = OKS_THRESHOLDS) -> EvalResult:
    """
    AP over a dataset. A dataset without ground truth scores 0 at every
    threshold.
    """
    images = list(images)
    tables = [oks_matrix(image, k) for image in images]
    num_gt = sum(
        sum(1 for p in image.gt.persons.persons if p.num_visible > 0) for image in images
    )

    per_threshold = {}
    pr_table = []
    for t in thresholds:
        scores, hits = [], []
        for image, ious in zip(images, tables):
            matched = {m.pred_index for m in match_image(image, k, t, ious)}
            for pi, person in enumerate(image.predictions.persons):
                scores.append(person.score)
                hits.append(pi in matched)
        order = np.argsort(-np.asarray(scores, dtype=np.float64), kind='mergesort')
        tp = np.asarray(hits, dtype=bool)[order]

        q = _interpolated_precision(tp, num_gt)
        per_threshold[t] = float(np.mean(q))
        pr_table.extend((t, float(r), float(p)) for r, p in zip(RECALL_POINTS, q))

    if not per_threshold:
        return EvalResult(0.0, 0.0, 0.0)

    ap = float(np.mean(list(per_threshold.values())))
    logger.debug('%d images, %d gt persons: AP %.4f', len(images), num_gt, ap)
    return EvalResult(
        ap=ap,
        ap50=per_threshold.get(0.5, float('nan')),
        ap75=per_threshold.get(0.75, float('nan')),
        per_threshold=per_threshold,
        pr_table=pr_table,
    )


def average_precision(images: Iterable[ImageEval], k: Sequence[float],
                      thresholds: Sequence[float] = OKS_THRESHOLDS) -> tuple[float, float, float]:
    result = evaluate_dataset(images, k, thresholds)
    return result.ap, result.ap50, result.ap75


# COCO keypoint JSON: ground truth {images, annotations: [{image_id, keypoints, area}]},
# predictions [{image_id, score, keypoints}].

def ground_truth_from_coco(data: Mapping, num_joints: int) -> dict[int, GroundTruth]:
    try:
        image_ids = [int(img['id']) for img in data.get('images', [])]
        by_image = defaultdict(list)
        for ann in data['annotations']:
            by_image[int(ann['image_id'])].append(ann)
    except (KeyError, TypeError, ValueError):
        raise ArchFormatError('ground truth: expected COCO keypoint layout {images, annotations}') from None

    out = {}
    for image_id in dict.fromkeys([*image_ids, *by_image]):
        anns = by_image.get(image_id, [])
        persons = keypoint_set_from_coco(anns, num_joints)
        try:
            out[image_id] = GroundTruth(persons, tuple(float(a['area']) for a in anns))
        except (KeyError, TypeError, ValueError):
            raise ArchFormatError(f'image {image_id}: every annotation needs a numeric area') from None
        except OksError as exc:
            raise OksError(f'image {image_id}: {exc}') from None
    return out


def predictions_from_coco(results: Iterable[Mapping], num_joints: int) -> dict[int, KeypointSet]:
    by_image = defaultdict(list)
    for entry in results:
        by_image[int(entry['image_id'])].append(entry)
    return {image_id: keypoint_set_from_coco(entries, num_joints) for image_id, entries in by_image.items()}


def build_dataset(gt: Mapping[int, GroundTruth], predictions: Mapping[int, KeypointSet],
                  num_joints: int) -> list[ImageEval]:
    """ Pair predictions with ground truth; predictions for unknown images are dropped. """
    extra = set(predictions) - set(gt)
    if extra:
        logger.warning('%d prediction image id(s) have no ground truth', len(extra))
    empty = KeypointSet((), num_joints)
    return [ImageEval(image_id, g, predictions.get(image_id, empty)) for image_id, g in sorted(gt.items())]


def load_dataset(gt_path, pred_path, num_joints: int) -> list[ImageEval]:
    with open(gt_path, 'r', encoding='utf-8') as f:
        gt = ground_truth_from_coco(json.load(f), num_joints)
    with open(pred_path, 'r', encoding='utf-8') as f:
        predictions = predictions_from_coco(json.load(f), num_joints)
    return build_dataset(gt, predictions, num_joints)
