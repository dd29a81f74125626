"""Tests for peak finding, tag grouping and output fusion."""

import numpy as np
import pytest

from litepose_toolkit.decode import (
    DecodeParams,
    Detection,
    decode,
    fuse_heatmaps,
    group_by_tags,
    keypoint_set_from_coco,
    keypoint_set_to_coco,
    nms_peaks,
    split_outputs,
    upsample_bilinear,
)
from litepose_toolkit.errors import ScaleMismatchError
from litepose_toolkit.synth import SynthParams, gaussian, make_scene


def test_single_peak():
    """Test one Gaussian gives one detection at its centre."""
    hm = gaussian(32, 12, 20, 2.0)[None].astype(np.float32)
    detections = nms_peaks(hm)
    assert len(detections) == 1
    assert (detections[0].x, detections[0].y) == (12.0, 20.0)
    assert detections[0].score == pytest.approx(1.0)


def test_two_separated_peaks():
    """Test peaks further apart than the window both survive."""
    hm = np.maximum(gaussian(32, 5, 5, 1.5), 0.8 * gaussian(32, 20, 20, 1.5))[None]
    detections = nms_peaks(hm.astype(np.float32))
    assert [(d.x, d.y) for d in detections] == [(5.0, 5.0), (20.0, 20.0)]


def test_peaks_inside_window_are_suppressed():
    """Test a weaker peak within the window is dropped."""
    hm = np.zeros((1, 16, 16), dtype=np.float32)
    hm[0, 8, 8] = 0.9
    hm[0, 8, 10] = 0.5
    detections = nms_peaks(hm, window=5)
    assert [(d.x, d.y) for d in detections] == [(8.0, 8.0)]
    assert len(nms_peaks(hm, window=3)) == 2


def test_below_threshold_is_empty():
    """Test a uniform map under the threshold has no peaks."""
    hm = np.full((3, 16, 16), 0.05, dtype=np.float32)
    assert nms_peaks(hm, threshold=0.1) == []


def test_equal_valued_tie_keeps_smallest_position():
    """Test two equal maxima sharing a window keep the smaller (y, x)."""
    hm = np.zeros((1, 16, 16), dtype=np.float32)
    hm[0, 6, 7] = 0.7
    hm[0, 6, 5] = 0.7
    detections = nms_peaks(hm)
    assert [(d.x, d.y) for d in detections] == [(5.0, 6.0)]


def test_max_per_joint():
    """Test the per-joint cap keeps the best peaks."""
    hm = np.zeros((1, 32, 32), dtype=np.float32)
    for i, value in enumerate((0.3, 0.9, 0.5, 0.7)):
        hm[0, 4 + 7 * i, 4] = value
    detections = nms_peaks(hm, max_per_joint=2)
    assert sorted(d.score for d in detections) == pytest.approx([0.7, 0.9])


def test_refine_moves_toward_higher_neighbour():
    """Test the quarter-pixel shift."""
    hm = np.zeros((1, 16, 16), dtype=np.float32)
    hm[0, 8, 8] = 1.0
    hm[0, 8, 9] = 0.5
    hm[0, 7, 8] = 0.4
    d = nms_peaks(hm, refine=True)[0]
    assert (d.x, d.y) == (8.25, 7.75)


def test_tags_must_match_heatmaps():
    """Test tag maps of another size are rejected."""
    with pytest.raises(ScaleMismatchError):
        nms_peaks(np.zeros((2, 8, 8)), np.zeros((2, 4, 4)))


@pytest.mark.parametrize('kwargs', [{'window': 4}, {'window': 1}, {'max_per_joint': 0}])
def test_invalid_params(kwargs):
    """Test decode parameters are checked."""
    with pytest.raises(ValueError):
        DecodeParams(**kwargs)


def test_group_two_persons():
    """Test distinct tags form distinct persons."""
    detections = [
        Detection(0, 1.0, 1.0, 0.9, 0.0),
        Detection(0, 10.0, 10.0, 0.8, 10.0),
        Detection(1, 2.0, 2.0, 0.7, 0.2),
        Detection(1, 11.0, 11.0, 0.6, 9.9),
    ]
    kps = group_by_tags(detections)
    assert len(kps) == 2
    first, second = kps.persons
    assert first.keypoints == ((1.0, 1.0, 2), (2.0, 2.0, 2))
    assert second.keypoints == ((10.0, 10.0, 2), (11.0, 11.0, 2))
    assert first.score == pytest.approx(0.8)


def test_group_single_detection():
    """Test one detection is one person with the other joints missing."""
    kps = group_by_tags([Detection(1, 3.0, 4.0, 0.5, 2.0)], num_joints=3)
    assert len(kps) == 1
    assert kps.persons[0].keypoints == ((0.0, 0.0, 0), (3.0, 4.0, 2), (0.0, 0.0, 0))
    assert kps.persons[0].num_visible == 1


def test_same_joint_same_tag_starts_new_person():
    """Test a person never takes a second detection of the same joint."""
    kps = group_by_tags([Detection(0, 1.0, 1.0, 0.9, 3.0), Detection(0, 9.0, 9.0, 0.8, 3.0)])
    assert len(kps) == 2


def test_tag_threshold():
    """Test a tag gap beyond the threshold splits the person."""
    detections = [Detection(0, 1.0, 1.0, 0.9, 0.0), Detection(1, 2.0, 2.0, 0.9, 1.5)]
    assert len(group_by_tags(detections, tag_threshold=1.0)) == 2
    assert len(group_by_tags(detections, tag_threshold=2.0)) == 1


def test_grouping_ignores_input_order():
    """Test shuffling detections does not change the grouping."""
    scene = make_scene(3, SynthParams(persons=4, joints=5))
    heatmaps, tags = fuse_heatmaps(scene.outputs())
    detections = nms_peaks(heatmaps, tags)
    expected = group_by_tags(detections)
    rng = np.random.default_rng(0)
    for _ in range(5):
        shuffled = [detections[i] for i in rng.permutation(len(detections))]
        assert group_by_tags(shuffled) == expected


def test_threshold_monotonicity():
    """Test raising the threshold never adds detections."""
    scene = make_scene(5, SynthParams(persons=3, joints=4, sigma=3.0))
    heatmaps, _ = fuse_heatmaps(scene.outputs())
    counts = [len(nms_peaks(heatmaps, threshold=t)) for t in (0.05, 0.2, 0.5, 0.9, 1.0)]
    assert counts == sorted(counts, reverse=True)
    assert counts[-1] == 0


def test_decode_synthetic_scene():
    """Test a synthetic scene decodes to its ground truth."""
    scene = make_scene(0, SynthParams(persons=3, joints=6))
    kps = decode(scene.outputs())
    expected = sorted(p.keypoints for p in scene.ground_truth.persons)
    assert sorted(p.keypoints for p in kps.persons) == expected


def test_decode_empty_heatmaps():
    """Test all-zero outputs decode to no persons."""
    kps = decode([np.zeros((1, 8, 16, 16), dtype=np.float32)])
    assert len(kps) == 0
    assert kps.num_joints == 4


def test_identical_scales_equal_single_scale():
    """Test fusing a second identical copy of the heatmaps changes nothing."""
    scene = make_scene(1, SynthParams(persons=2, joints=3, heatmap_size=32, margin=0, sigma=1.5))
    tagged = scene.outputs()[0]
    fused, tags = fuse_heatmaps([tagged, tagged[:, :3]])
    np.testing.assert_allclose(fused, scene.heatmaps, atol=1e-6)
    np.testing.assert_array_equal(tags, scene.tags)


def test_two_scale_fusion():
    """Test a coarse tag-carrying output is resized to the fine scale."""
    coarse = np.zeros((1, 4, 8, 8), dtype=np.float32)
    fine = np.ones((1, 2, 16, 16), dtype=np.float32)
    fused, tags = fuse_heatmaps([coarse, fine])
    assert fused.shape == tags.shape == (2, 16, 16)
    np.testing.assert_allclose(fused, 0.5)


def test_scale_mismatch():
    """Test outputs that do not form one tagged and several plain outputs."""
    with pytest.raises(ScaleMismatchError):
        fuse_heatmaps([np.zeros((1, 4, 8, 8)), np.zeros((1, 2, 12, 12))])
    with pytest.raises(ScaleMismatchError):
        split_outputs([np.zeros((1, 2, 8, 8)), np.zeros((1, 2, 16, 16))], num_joints=2)
    with pytest.raises(ScaleMismatchError):
        split_outputs([])


def test_upsample_constant_and_identity():
    """Test resizing keeps constants and leaves same-size maps alone."""
    maps = np.full((2, 4, 4), 3.0, dtype=np.float32)
    np.testing.assert_allclose(upsample_bilinear(maps, 8, 8), 3.0)
    x = np.arange(16, dtype=np.float32).reshape(4, 4)
    np.testing.assert_array_equal(upsample_bilinear(x, 4, 4), x)


def test_coco_conversion():
    """Test the COCO result layout and its pixel scale."""
    kps = group_by_tags([Detection(0, 2.0, 3.0, 0.6, 0.0), Detection(1, 4.0, 5.0, 0.8, 0.1)])
    results = keypoint_set_to_coco(kps, image_id=7, scale=2.0)
    assert results == [{
        'image_id': 7,
        'category_id': 1,
        'score': pytest.approx(0.7),
        'keypoints': [4.0, 6.0, 2, 8.0, 10.0, 2],
    }]
    back = keypoint_set_from_coco(results, 2)
    assert back.persons[0].keypoints == ((4.0, 6.0, 2), (8.0, 10.0, 2))
    with pytest.raises(ValueError):
        keypoint_set_from_coco(results, 3)
