"""
Synthetic bottom-up pose scenes.

Persons are planted one per grid cell. Every joint is a unit-peak Gaussian
on its own heatmap channel, and the matching tag channel holds the person's
tag in a square around the joint. Within a cell joints keep window // 2 + 1
pixels from the cell border, so same-joint peaks of two persons are always
further apart than the NMS window.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from .decode import KeypointSet, Person
from .seeding import rng_for

logger = logging.getLogger(__name__)


@dataclass(frozen=True, slots=True)
class SynthParams:
    persons: int = 2
    joints: int = 14
    heatmap_size: int = 64
    sigma: float = 2.0
    """ Gaussian standard deviation in heatmap pixels. """
    tag_spacing: float = 5.0
    """ Tag gap between consecutive persons; keep it above the grouping threshold. """
    margin: int = 4
    """ Blank border around the person grid. """
    window: int = 5
    """ NMS window the scene must stay decodable with. """

    def __post_init__(self):
        if self.persons < 0:
            raise ValueError(f'{self.persons}: persons must be non-negative')
        if self.joints < 1:
            raise ValueError(f'{self.joints}: at least one joint is required')
        if self.sigma <= 0:
            raise ValueError(f'{self.sigma}: sigma must be positive')

    @property
    def grid(self) -> int:
        return max(1, math.ceil(math.sqrt(self.persons)))

    @property
    def cell(self) -> int:
        return (self.heatmap_size - 2 * self.margin) // self.grid


@dataclass(frozen=True, slots=True)
class SynthScene:
    heatmaps: np.ndarray
    """ [J, H, W] float32. """
    tags: np.ndarray
    """ [J, H, W] float32. """
    ground_truth: KeypointSet
    areas: tuple[float, ...]

    def outputs(self) -> list[np.ndarray]:
        """ The scene as a single tag-carrying network output [1, 2J, H, W]. """
        return [np.concatenate([self.heatmaps, self.tags])[None]]

    def to_coco(self, image_id: int = 0) -> dict:
        size = self.heatmaps.shape[-1]
        annotations = []
        for index, (person, area) in enumerate(zip(self.ground_truth.persons, self.areas)):
            flat = []
            for x, y, v in person.keypoints:
                flat.extend((x, y, v))
            annotations.append({
                'id': index + 1,
                'image_id': image_id,
                'category_id': 1,
                'keypoints': flat,
                'num_keypoints': person.num_visible,
                'area': area,
            })
        return {
            'images': [{'id': image_id, 'width': size, 'height': size}],
            'annotations': annotations,
            'categories': [{'id': 1, 'name': 'person'}],
        }


def gaussian(size: int, x: int, y: int, sigma: float) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size]
    return np.exp(-((xs - x) ** 2 + (ys - y) ** 2) / (2.0 * sigma ** 2))


def make_scene(seed: int, params: SynthParams = SynthParams()) -> SynthScene:
    size = params.heatmap_size
    inner = params.window // 2 + 1
    cell = params.cell
    if params.persons and cell < 2 * inner + 1:
        raise ValueError(
            f'{params.persons} persons: cells of {cell} px cannot keep {inner} px from their border'
        )

    rng = rng_for(seed, 'synth')
    heatmaps = np.zeros((params.joints, size, size), dtype=np.float64)
    tags = np.zeros((params.joints, size, size), dtype=np.float32)
    half = params.window // 2

    persons = []
    for index in range(params.persons):
        row, col = divmod(index, params.grid)
        x0 = params.margin + col * cell
        y0 = params.margin + row * cell
        xs = rng.integers(x0 + inner, x0 + cell - inner, size=params.joints, endpoint=False)
        ys = rng.integers(y0 + inner, y0 + cell - inner, size=params.joints, endpoint=False)
        tag = index * params.tag_spacing

        keypoints = []
        for j, (x, y) in enumerate(zip(xs.tolist(), ys.tolist())):
            np.maximum(heatmaps[j], gaussian(size, x, y, params.sigma), out=heatmaps[j])
            tags[j, max(0, y - half):y + half + 1, max(0, x - half):x + half + 1] = tag
            keypoints.append((float(x), float(y), 2))
        persons.append(Person(tuple(keypoints), 1.0, tag))

    logger.debug('synthetic scene: %d persons, %d joints, %d px', params.persons, params.joints, size)
    return SynthScene(
        heatmaps=heatmaps.astype(np.float32),
        tags=tags,
        ground_truth=KeypointSet(tuple(persons), params.joints),
        areas=(float(cell * cell),) * params.persons,
    )
