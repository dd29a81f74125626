"""
Bottom-up keypoint decoding.

Heatmaps of every output scale are resized to the largest scale and
averaged, per-joint peaks are found with a window maximum filter and the
peaks are grouped into persons by their scalar associative-embedding tags.

Output layout: each output tensor holds num_joints heatmap channels; the
tag-carrying output (the coarsest one) holds num_joints tag channels after
its heatmaps.
"""

import logging
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.ndimage import maximum_filter

from .errors import ScaleMismatchError

logger = logging.getLogger(__name__)


@dataclass(frozen=True, slots=True)
class DecodeParams:
    window: int = 5
    """ Side of the square NMS window; odd, at least 3. """
    threshold: float = 0.1
    """ Peaks must score strictly above this. """
    max_per_joint: int = 30
    tag_threshold: float = 1.0
    """ Largest tag distance at which a detection joins an existing person. """
    refine: bool = False
    """ Shift each peak a quarter pixel toward its higher neighbour. """

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError(f'{self.window}: NMS window must be odd and at least 3')
        if self.max_per_joint < 1:
            raise ValueError(f'{self.max_per_joint}: max_per_joint must be positive')


@dataclass(frozen=True, slots=True)
class Detection:
    joint: int
    x: float
    y: float
    score: float
    tag: float = 0.0


@dataclass(frozen=True, slots=True)
class Person:
    keypoints: tuple[tuple[float, float, int], ...]
    """ (x, y, v) per joint; v = 2 when detected, 0 when missing. """
    score: float
    """ Mean score of the member detections. """
    tag: float = 0.0

    @property
    def num_visible(self) -> int:
        return sum(1 for _, _, v in self.keypoints if v > 0)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.keypoints, dtype=np.float64).reshape(-1, 3)


@dataclass(frozen=True, slots=True)
class KeypointSet:
    persons: tuple[Person, ...]
    num_joints: int

    def __len__(self):
        return len(self.persons)


def _order(d: Detection):
    return (d.joint, -d.score, d.y, d.x)


def nms_peaks(
    heatmaps: np.ndarray,
    tags: np.ndarray | None = None,
    *,
    window: int = 5,
    max_per_joint: int = 30,
    threshold: float = 0.1,
    refine: bool = False,
) -> list[Detection]:
    """
    Per-joint local maxima of `heatmaps` [J, H, W].

    A pixel is a peak when it equals the maximum of its window and exceeds
    `threshold`. Equal-valued maxima sharing a window keep only the one with
    the smallest (y, x). Each joint keeps its `max_per_joint` best peaks.
    """
    if heatmaps.ndim != 3:
        raise ValueError(f'{heatmaps.shape}: expected [J, H, W] heatmaps')
    if tags is not None and tags.shape != heatmaps.shape:
        raise ScaleMismatchError(f'{tags.shape}: tag maps must match heatmaps {heatmaps.shape}')

    half = window // 2
    detections = []
    for joint, hm in enumerate(heatmaps):
        local_max = maximum_filter(hm, size=window, mode='constant', cval=-np.inf)
        ys, xs = np.nonzero((hm == local_max) & (hm > threshold))
        candidates = sorted(zip(ys.tolist(), xs.tolist()), key=lambda p: (-hm[p], p[0], p[1]))

        kept = []
        for y, x in candidates:
            if any(abs(y - ky) <= half and abs(x - kx) <= half for ky, kx in kept):
                continue
            kept.append((y, x))
            if len(kept) == max_per_joint:
                break

        for y, x in kept:
            fx, fy = float(x), float(y)
            if refine:
                fx, fy = _refine(hm, y, x)
            tag = float(tags[joint, y, x]) if tags is not None else 0.0
            detections.append(Detection(joint, fx, fy, float(hm[y, x]), tag))

    return detections


def _refine(hm: np.ndarray, y: int, x: int) -> tuple[float, float]:
    h, w = hm.shape
    fx, fy = float(x), float(y)
    if 0 < x < w - 1:
        fx += 0.25 * np.sign(hm[y, x + 1] - hm[y, x - 1])
    if 0 < y < h - 1:
        fy += 0.25 * np.sign(hm[y + 1, x] - hm[y - 1, x])
    return fx, fy


def group_by_tags(detections: Iterable[Detection], tag_threshold: float = 1.0,
                  num_joints: int | None = None) -> KeypointSet:
    """
    Greedy grouping: joints in index order, detections by descending score.
    A detection joins the person (lacking that joint) whose mean tag is
    nearest, if within `tag_threshold`; otherwise it starts a new person.
    """
    ordered = sorted(detections, key=_order)
    if num_joints is None:
        num_joints = max((d.joint for d in ordered), default=-1) + 1

    members: list[dict[int, Detection]] = []
    for det in ordered:
        best, best_dist = None, None
        for index, person in enumerate(members):
            if det.joint in person:
                continue
            dist = abs(det.tag - _mean_tag(person))
            if dist <= tag_threshold and (best_dist is None or dist < best_dist):
                best, best_dist = index, dist
        if best is None:
            members.append({det.joint: det})
        else:
            members[best][det.joint] = det

    persons = []
    for person in members:
        keypoints = tuple(
            (person[j].x, person[j].y, 2) if j in person else (0.0, 0.0, 0)
            for j in range(num_joints)
        )
        score = float(np.mean([d.score for d in person.values()]))
        persons.append(Person(keypoints, score, _mean_tag(person)))

    return KeypointSet(tuple(persons), num_joints)


def _mean_tag(person: dict[int, Detection]) -> float:
    return float(np.mean([d.tag for d in person.values()]))


def _resize_axis(size_in: int, size_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # half-pixel centres, edge samples clamped
    src = (np.arange(size_out) + 0.5) * (size_in / size_out) - 0.5
    src = np.clip(src, 0, size_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, size_in - 1)
    return lo, hi, (src - lo)


def upsample_bilinear(maps: np.ndarray, height: int, width: int) -> np.ndarray:
    """ Bilinearly resize [..., H, W] maps to [..., height, width]. """
    h, w = maps.shape[-2:]
    if (h, w) == (height, width):
        return maps.astype(np.float32)

    y0, y1, fy = _resize_axis(h, height)
    x0, x1, fx = _resize_axis(w, width)
    m = maps.astype(np.float64)
    rows = m[..., y0, :] * (1 - fy)[:, None] + m[..., y1, :] * fy[:, None]
    out = rows[..., x0] * (1 - fx) + rows[..., x1] * fx
    return out.astype(np.float32)


def _squeeze(output: np.ndarray) -> np.ndarray:
    if output.ndim == 4:
        if output.shape[0] != 1:
            raise ValueError(f'{output.shape}: decode one image at a time')
        return output[0]
    if output.ndim != 3:
        raise ValueError(f'{output.shape}: expected [1, C, H, W] or [C, H, W]')
    return output


def split_outputs(outputs: Sequence[np.ndarray], num_joints: int | None = None) -> tuple[list[np.ndarray], np.ndarray, int]:
    """ (heatmaps per output, tag maps, num_joints) from raw network outputs. """
    maps = [_squeeze(o) for o in outputs]
    if not maps:
        raise ScaleMismatchError('no outputs to decode')
    channels = [m.shape[0] for m in maps]
    if num_joints is None:
        num_joints = min(channels) if len(maps) > 1 else channels[0] // 2
    tagged = [m for m in maps if m.shape[0] == 2 * num_joints]
    if len(tagged) != 1 or any(c not in (num_joints, 2 * num_joints) for c in channels):
        raise ScaleMismatchError(
            f'{channels}: expected one output with {2 * num_joints} channels and the rest with {num_joints}'
        )
    return [m[:num_joints] for m in maps], tagged[0][num_joints:], num_joints


def fuse_heatmaps(outputs: Sequence[np.ndarray], num_joints: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """ Average of all heatmaps and the tag maps, both at the largest output scale. """
    heatmaps, tags, _ = split_outputs(outputs, num_joints)
    height = max(h.shape[1] for h in heatmaps)
    width = max(h.shape[2] for h in heatmaps)
    for h in [*heatmaps, tags]:
        if height % h.shape[1] or width % h.shape[2] or height // h.shape[1] != width // h.shape[2]:
            raise ScaleMismatchError(f'{h.shape[1:]}: not an integer downscale of {(height, width)}')

    fused = np.mean([upsample_bilinear(h, height, width) for h in heatmaps], axis=0)
    return fused.astype(np.float32), upsample_bilinear(tags, height, width)


def decode(outputs: Sequence[np.ndarray], params: DecodeParams = DecodeParams(),
           num_joints: int | None = None) -> KeypointSet:
    heatmaps, tags = fuse_heatmaps(outputs, num_joints)
    detections = nms_peaks(
        heatmaps, tags,
        window=params.window,
        max_per_joint=params.max_per_joint,
        threshold=params.threshold,
        refine=params.refine,
    )
    logger.debug('%d detections over %d joints', len(detections), heatmaps.shape[0])
    return group_by_tags(detections, params.tag_threshold, heatmaps.shape[0])


# COCO keypoint results layout: [{image_id, category_id, score, keypoints: [x1, y1, v1, ...]}]

def keypoint_set_to_coco(kps: KeypointSet, image_id: int, scale: float = 1.0) -> list[dict]:
    """ `scale` maps heatmap pixels to image pixels. """
    results = []
    for person in kps.persons:
        flat = []
        for x, y, v in person.keypoints:
            flat.extend((x * scale, y * scale, v))
        results.append({'image_id': image_id, 'category_id': 1, 'score': person.score, 'keypoints': flat})
    return results


def keypoint_set_from_coco(results: Iterable[dict], num_joints: int) -> KeypointSet:
    persons = []
    for entry in results:
        flat = entry['keypoints']
        if len(flat) != 3 * num_joints:
            raise ValueError(f'{len(flat)}: expected {3 * num_joints} keypoint values')
        keypoints = tuple(
            (float(flat[3 * j]), float(flat[3 * j + 1]), int(flat[3 * j + 2])) for j in range(num_joints)
        )
        persons.append(Person(keypoints, float(entry.get('score', 1.0))))
    return KeypointSet(tuple(persons), num_joints)
