"""
Tests for confidence maps, the three fusion rules and the inference path
"""

import json
import math

import numpy as np
import pytest
import torch

from mask_fusion.core.errors import ShapeError
from mask_fusion.core.fuse import (
    fuse_gaussian,
    fuse_nearest,
    fuse_vote,
    fuse_weighted,
    fusion_report,
    gaussian_confidence,
    infer_subset,
    sampling_matrix,
    through_plane_distance,
    warp_confidence,
    write_fusion,
)
from mask_fusion.core.geometry import AffineParams
from mask_fusion.core.nets import Segmentor
from mask_fusion.core.volume import ViewAxis, Volume

AX, COR, SAG = ViewAxis.AXIAL, ViewAxis.CORONAL, ViewAxis.SAGITTAL


def _identity_aligner(moving, fixed):
    return torch.zeros(moving.shape[0], 6)


def _threshold_segmentor(x):
    return (x > 0.5).float()


def test_confidence_is_one_on_planes_and_decays_between():
    conf = gaussian_confidence(AX, 16, 8).data
    assert np.all(conf[0] == 1.0) and np.all(conf[8] == 1.0)
    assert abs(float(conf[4, 3, 5]) - math.exp(-0.5)) < 1e-6
    assert np.all(conf[2] > conf[4])


def test_confidence_follows_the_view_axis():
    conf = gaussian_confidence(SAG, 8, 4).data
    assert np.all(conf[:, :, 0] == 1.0)
    assert abs(float(conf[3, 1, 2]) - math.exp(-0.5)) < 1e-6


def test_confidence_degenerates_to_one_at_full_resolution():
    assert np.all(gaussian_confidence(COR, 8, 1).data == 1.0)


def test_through_plane_distance_profile():
    assert through_plane_distance(AX, 8, 4).tolist() == [0, 1, 2, 3, 0, 1, 2, 3]
    with pytest.raises(ShapeError):
        through_plane_distance(AX, 10, 4)


def test_sampling_matrix_marks_acquired_slices():
    s = sampling_matrix(COR, 8, 4).data
    assert s.mean() == 0.25
    assert np.all(s[:, 0, :] == 1.0) and np.all(s[:, 4, :] == 1.0)


def test_warped_confidence_is_zero_outside_coverage():
    conf = Volume(np.ones((9, 9, 9), dtype=np.float32))
    shifted = warp_confidence(conf, AffineParams((0.0, 0.0, 0.0), (1.0, 0.0, 0.0)))
    assert np.all(shifted.data[:, :, -2:] == 0.0)
    assert np.all(shifted.data[:, :, :4] == 1.0)


def test_weighted_fusion_closed_form():
    masks = {AX: np.ones((2, 2, 2)), COR: np.zeros((2, 2, 2))}
    confs = {AX: np.ones((2, 2, 2)), COR: np.full((2, 2, 2), 0.5)}
    assert np.allclose(fuse_weighted(masks, confs), 2.0 / 3.0)


def test_weighted_fusion_without_weight_is_zero():
    masks = {AX: np.ones((2, 2, 2))}
    assert not fuse_weighted(masks, {AX: np.zeros((2, 2, 2))}).any()


def test_weighted_fusion_needs_matching_confidences():
    with pytest.raises(ShapeError):
        fuse_weighted({AX: np.ones((2, 2, 2)), COR: np.ones((2, 2, 2))}, {AX: np.ones((2, 2, 2))})


def test_complementary_views_recover_truth_on_acquired_voxels(rng):
    """Each view is exact on its own planes and wrong elsewhere"""
    n, d = 8, 2
    gt = (rng.random((n, n, n)) > 0.5).astype(np.float32)
    masks, confs = {}, {}
    for axis in (AX, COR):
        acquired = sampling_matrix(axis, n, d).data > 0
        masks[axis] = np.where(acquired, gt, 1.0 - gt)
        confs[axis] = gaussian_confidence(axis, n, d).data
    fused = fuse_weighted(masks, confs) >= 0.5
    covered = np.maximum(confs[AX], confs[COR]) == 1.0
    assert covered.any()
    assert np.array_equal(fused[covered], gt[covered] > 0)


def test_vote_truth_table():
    one, zero = np.ones((1, 1, 1)), np.zeros((1, 1, 1))
    assert fuse_vote([one, one, zero]).data.item() == 1.0
    assert fuse_vote([one, zero, zero]).data.item() == 0.0
    assert fuse_vote([zero, zero, zero]).data.item() == 0.0


def test_vote_of_identical_masks_is_identity(rng):
    m = (rng.random((4, 4, 4)) > 0.5).astype(np.float32)
    assert np.array_equal(fuse_vote([m, m, m]).data, m)


def test_nearest_single_view_passthrough(rng):
    m = (rng.random((8, 8, 8)) > 0.5).astype(np.float32)
    out = fuse_nearest({AX: m}, {AX: sampling_matrix(AX, 8, 4).data})
    assert np.array_equal(out.data, m)


def test_nearest_prefers_the_view_acquired_at_the_voxel():
    masks = {AX: np.ones((8, 8, 8)), COR: np.zeros((8, 8, 8))}
    sampling = {AX: sampling_matrix(AX, 8, 4).data, COR: sampling_matrix(COR, 8, 4).data}
    out = fuse_nearest(masks, sampling).data
    assert np.all(out[0] == 1.0)
    assert np.all(out[4] == 1.0)
    assert out[2, 0, 3] == 0.0


def test_single_view_inference_is_the_axial_segmentation(rng):
    images = {axis: Volume(rng.random((8, 8, 8)).astype(np.float32)) for axis in ViewAxis.ordered()}
    S = Segmentor(base_channels=2)
    result = infer_subset(images, S, _identity_aligner, d=4, n_views=1)
    with torch.no_grad():
        expected = S(torch.from_numpy(images[AX].data.copy())[None, None])[0, 0].numpy()
    assert np.allclose(result.soft.data, expected, atol=1e-6)
    assert set(result.aligned_masks) == {AX}


def test_identical_aligned_views_fuse_to_the_single_prediction(rng):
    data = rng.random((8, 8, 8)).astype(np.float32)
    images = {axis: Volume(data) for axis in ViewAxis.ordered()}
    S = Segmentor(base_channels=2)
    fused = infer_subset(images, S, _identity_aligner, d=1)
    single = infer_subset(images, S, _identity_aligner, d=1, n_views=1)
    assert np.allclose(fused.soft.data, single.soft.data, atol=1e-6)
    assert fused.transforms[COR] == AffineParams.identity()


@pytest.mark.parametrize("method", ["gaussian", "vote", "nearest"])
def test_fusion_methods_return_binary_masks(method, rng):
    images = {axis: Volume(rng.random((8, 8, 8)).astype(np.float32)) for axis in ViewAxis.ordered()}
    result = infer_subset(images, _threshold_segmentor, _identity_aligner, d=4, method=method)
    assert result.binary.kind == "mask"
    assert result.method == method


def test_fuse_gaussian_uses_every_given_view(rng):
    images = {axis: Volume(rng.random((8, 8, 8)).astype(np.float32)) for axis in ViewAxis.ordered()}
    result = fuse_gaussian(images, _threshold_segmentor, _identity_aligner, d=4)
    expected = infer_subset(images, _threshold_segmentor, _identity_aligner, d=4, method="gaussian")
    assert result.method == "gaussian"
    assert set(result.confidences) == set(ViewAxis.ordered())
    assert np.array_equal(result.soft.data, expected.soft.data)


@pytest.mark.parametrize("order", ["align-then-segment", "segment-then-align"])
def test_both_orders_agree_under_identity_alignment(order, rng):
    images = {axis: Volume(rng.random((8, 8, 8)).astype(np.float32)) for axis in ViewAxis.ordered()}
    result = infer_subset(images, _threshold_segmentor, _identity_aligner, d=4, order=order)
    for axis in ViewAxis.ordered():
        assert np.array_equal(result.aligned_masks[axis].data, (images[axis].data > 0.5).astype(np.float32))


def test_inference_rejects_bad_requests(rng):
    images = {axis: Volume(rng.random((8, 8, 8)).astype(np.float32)) for axis in ViewAxis.ordered()}
    with pytest.raises(ShapeError):
        infer_subset(images, _threshold_segmentor, _identity_aligner, d=4, method="median")
    with pytest.raises(ShapeError):
        infer_subset({COR: images[COR]}, _threshold_segmentor, _identity_aligner, d=4)


def test_fusion_report_and_outputs(corpus, tmp_path):
    study = corpus.prepared("test")[0]
    result = infer_subset(study.images, _threshold_segmentor, _identity_aligner, d=corpus.d_vox)
    report = fusion_report(result, study)
    assert set(report["per_view_dsc"]) == {"axial", "coronal", "sagittal"}
    assert set(report["cross_view_dsc"]) == {"1&2", "1&3", "2&3", "2&HR", "3&HR"}
    assert 0.0 <= report["fused_dsc"] <= 1.0
    assert report["transforms"]["axial"]["rotation_error_deg"] == 0.0
    path = write_fusion(result, tmp_path / "out", report)
    assert json.loads(path.read_text())["study"] == study.study_id
    assert (tmp_path / "out" / "fused_msk.smv").exists()
    assert (tmp_path / "out" / "aligned_sagittal_msk.smv").exists()


def _soft_segmentor(x):
    return torch.sigmoid(8.0 * (x - 0.4))


def _tilted_aligner(moving, fixed):
    theta = torch.zeros(moving.shape[0], 6)
    theta[:, 2] = math.radians(6.0)
    theta[:, 3] = 0.05
    return theta


def test_fused_soft_mask_is_a_convex_combination(corpus):
    for study in corpus.prepared():
        result = infer_subset(study.images, _soft_segmentor, _tilted_aligner, d=corpus.d_vox)
        stack = np.stack([result.aligned_masks[a].data for a in ViewAxis.ordered()])
        weight = sum(result.confidences[a].data.astype(np.float64) for a in ViewAxis.ordered())
        covered = weight > 1e-8
        soft = result.soft.data
        assert covered.any()
        assert np.all(soft[covered] >= stack.min(axis=0)[covered] - 1e-5)
        assert np.all(soft[covered] <= stack.max(axis=0)[covered] + 1e-5)
        assert not soft[~covered].any()


def test_confidence_weights_normalize(corpus):
    for study in corpus.prepared():
        result = infer_subset(study.images, _soft_segmentor, _tilted_aligner, d=corpus.d_vox)
        ones = {a: np.ones_like(result.soft.data) for a in ViewAxis.ordered()}
        fused = fuse_weighted(ones, result.confidences)
        weight = sum(result.confidences[a].data.astype(np.float64) for a in ViewAxis.ordered())
        covered = weight > 1e-8
        assert np.max(np.abs(fused[covered] - 1.0)) < 1e-5


def test_fusion_ignores_view_insertion_order(corpus):
    for study in corpus.prepared():
        forward = dict(study.images)
        backward = {a: study.images[a] for a in reversed(list(study.images))}
        a = infer_subset(forward, _soft_segmentor, _tilted_aligner, d=corpus.d_vox)
        b = infer_subset(backward, _soft_segmentor, _tilted_aligner, d=corpus.d_vox)
        assert np.array_equal(a.soft.data, b.soft.data)
        conf = {k: a.confidences[k] for k in reversed(list(a.confidences))}
        masks = {k: a.aligned_masks[k] for k in reversed(list(a.aligned_masks))}
        assert np.array_equal(fuse_weighted(masks, conf), a.soft.data)


@pytest.mark.parametrize("k", [1, 2, 3, 4, 5])
def test_vote_matches_a_voxelwise_count(k, rng):
    masks = [rng.random((5, 5, 5)) for _ in range(k)]
    out = fuse_vote(masks).data
    for idx in np.ndindex(5, 5, 5):
        ayes = sum(1 for m in masks if m[idx] >= 0.5)
        assert out[idx] == (1.0 if 2 * ayes > k else 0.0)


def _nearest_by_search(masks, sampling):
    axes = [a for a in ViewAxis.ordered() if a in masks]
    shape = masks[axes[0]].shape
    out = np.zeros(shape, dtype=np.float32)
    sites = {a: np.argwhere(sampling[a] >= 0.5) for a in axes}
    for idx in np.ndindex(*shape):
        best, best_axis = None, None
        for a in axes:
            if not len(sites[a]):
                continue
            d2 = int(((sites[a] - np.array(idx)) ** 2).sum(axis=1).min())
            if best is None or d2 < best:
                best, best_axis = d2, a
        out[idx] = 1.0 if masks[best_axis][idx] >= 0.5 else 0.0
    return out


def test_nearest_matches_an_exhaustive_distance_search(rng):
    n = 6
    masks = {a: (rng.random((n, n, n)) > 0.5).astype(np.float32) for a in ViewAxis.ordered()}
    sampling = {a: (rng.random((n, n, n)) > 0.85).astype(np.float32) for a in ViewAxis.ordered()}
    out = fuse_nearest(masks, sampling).data
    assert np.array_equal(out, _nearest_by_search(masks, sampling))


def test_nearest_matches_search_on_slice_patterns(rng):
    n, d = 8, 4
    masks = {a: (rng.random((n, n, n)) > 0.5).astype(np.float32) for a in ViewAxis.ordered()}
    sampling = {a: sampling_matrix(a, n, d).data for a in ViewAxis.ordered()}
    out = fuse_nearest(masks, sampling).data
    assert np.array_equal(out, _nearest_by_search(masks, sampling))


def test_nearest_ties_go_to_axial():
    n = 4
    masks = {SAG: np.zeros((n, n, n)), COR: np.zeros((n, n, n)), AX: np.ones((n, n, n))}
    sampling = {a: np.ones((n, n, n)) for a in masks}
    assert np.all(fuse_nearest(masks, sampling).data == 1.0)
    masks = {COR: np.ones((n, n, n)), SAG: np.zeros((n, n, n))}
    sampling = {a: np.ones((n, n, n)) for a in masks}
    assert np.all(fuse_nearest(masks, sampling).data == 1.0)
