"""Inference orchestration, uncertainty, post-processing, metrics, reports."""

import csv
import json
import math

import numpy as np
import pytest
import torch

from reference import brute_dice, brute_hausdorff, brute_lesion_counts
from synthdata import base_config

from voxseg.config import ExperimentConfig, override_config
from voxseg.errors import VoxsegError
from voxseg.evaluation import (
    LESION_OVERLAP_MIN,
    REPORT_COLUMNS,
    EvalRow,
    PredictionSet,
    compute_metrics,
    object_uncertainty,
    optimal_threshold,
    postprocess,
    run_test,
    sample_predictions,
    segment_volume,
    size_binned_metrics,
    voxel_uncertainty,
    write_report,
)
from voxseg.models import ModelSpec, build_model, load_model, save_model
from voxseg.nifti import read_nifti
from voxseg.volume import Volume


def _vol(data, spacing=(1.0, 1.0, 1.0), affine=None):
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 3:
        data = data[None]
    if affine is None:
        affine = np.diag(list(spacing) + [1.0])
    return Volume(data=data, spacing=spacing, affine=affine)


# ---------------------------------------------------------------------------
# compute_metrics: hand-built oracles
# ---------------------------------------------------------------------------


class TestComputeMetrics:
    def test_perfect_match(self):
        m = np.zeros((6, 6, 6))
        m[2:4, 2:4, 2:4] = 1
        row = compute_metrics(m, m, (1.0, 1.0, 1.0))
        assert row.dice == 1.0
        assert row.precision == 1.0
        assert row.recall == 1.0
        assert row.specificity == 1.0
        assert row.hausdorff_mm == 0.0
        assert row.abs_volume_diff_mm3 == 0.0
        assert row.rel_volume_error == 0.0
        assert (row.lesion_tp, row.lesion_fp, row.lesion_fn) == (1, 0, 0)

    def test_both_empty(self):
        z = np.zeros((4, 4, 4))
        row = compute_metrics(z, z, (1.0, 1.0, 1.0))
        assert row.dice == 1.0
        assert math.isnan(row.precision)
        assert math.isnan(row.recall)
        assert row.specificity == 1.0
        assert row.hausdorff_mm == 0.0
        assert row.abs_volume_diff_mm3 == 0.0
        assert math.isnan(row.rel_volume_error)
        assert (row.lesion_tp, row.lesion_fp, row.lesion_fn) == (0, 0, 0)

    def test_empty_prediction(self):
        gt = np.zeros((4, 4, 4))
        gt[1:3, 1:3, 1:3] = 1
        row = compute_metrics(np.zeros_like(gt), gt, (1.0, 1.0, 1.0))
        assert row.dice == 0.0
        assert math.isnan(row.precision)
        assert row.recall == 0.0
        assert row.specificity == 1.0
        assert math.isnan(row.hausdorff_mm)
        assert row.abs_volume_diff_mm3 == 8.0
        assert row.rel_volume_error == -1.0
        assert (row.lesion_tp, row.lesion_fp, row.lesion_fn) == (0, 0, 1)

    def test_empty_truth(self):
        pred = np.zeros((4, 4, 4))
        pred[0, 0, 0] = 1
        row = compute_metrics(pred, np.zeros_like(pred), (1.0, 1.0, 1.0))
        assert row.dice == 0.0
        assert row.precision == 0.0
        assert math.isnan(row.recall)
        assert math.isnan(row.hausdorff_mm)
        assert math.isnan(row.rel_volume_error)
        assert (row.lesion_tp, row.lesion_fp, row.lesion_fn) == (0, 1, 0)

    def test_manual_confusion_counts(self):
        # 4x4 plane: tp=2, fp=1, fn=1, tn=12
        pred = np.zeros((4, 4))
        gt = np.zeros((4, 4))
        gt[0, 0] = gt[0, 1] = gt[0, 2] = 1
        pred[0, 0] = pred[0, 1] = pred[1, 3] = 1
        row = compute_metrics(pred, gt, (1.0, 1.0))
        assert row.dice == pytest.approx(2 * 2 / (2 * 2 + 1 + 1))
        assert row.precision == pytest.approx(2 / 3)
        assert row.recall == pytest.approx(2 / 3)
        assert row.specificity == pytest.approx(12 / 13)

    def test_hausdorff_uses_spacing(self):
        # identical cubes shifted by one voxel along an axis with 2 mm spacing
        gt = np.zeros((8, 4, 4))
        pred = np.zeros((8, 4, 4))
        gt[1:3, 1:3, 1:3] = 1
        pred[2:4, 1:3, 1:3] = 1
        row = compute_metrics(pred, gt, (2.0, 1.0, 1.0))
        assert row.hausdorff_mm == pytest.approx(2.0)
        assert row.abs_volume_diff_mm3 == 0.0

    def test_volume_difference_in_mm3(self):
        gt = np.zeros((6, 6, 6))
        pred = np.zeros((6, 6, 6))
        gt[0:2, 0:2, 0:2] = 1  # 8 voxels
        pred[0:2, 0:2, 0:2] = 1
        pred[4, 4, 4:6] = 1  # 2 extra voxels
        row = compute_metrics(pred, gt, (1.0, 2.0, 3.0))
        assert row.abs_volume_diff_mm3 == pytest.approx(2 * 6.0)
        assert row.rel_volume_error == pytest.approx(12.0 / 48.0)

    def test_lesion_overlap_boundary(self):
        assert LESION_OVERLAP_MIN == 0.25
        gt = np.zeros((12, 3, 3))
        pred = np.zeros((12, 3, 3))
        gt[0:4, 0, 0] = 1  # 4-voxel component
        gt[8:12, 0, 0] = 1
        gt[8, 1, 0] = 1  # 5-voxel component
        pred[0, 0, 0] = 1  # 1/4 = 0.25 -> detected
        pred[8, 0, 0] = 1  # 1/5 = 0.20 -> missed
        pred[4:6, 2, 2] = 1  # no truth overlap -> false positive
        row = compute_metrics(pred, gt, (1.0, 1.0, 1.0))
        assert (row.lesion_tp, row.lesion_fp, row.lesion_fn) == (1, 1, 1)

    def test_shape_mismatch(self):
        with pytest.raises(VoxsegError, match="shape"):
            compute_metrics(np.zeros((3, 3)), np.zeros((3, 4)), (1.0, 1.0))


def test_metrics_match_brute_force_on_random_pairs():
    rng = np.random.default_rng(7)
    for trial in range(30):
        shape = tuple(rng.integers(3, 9, size=3))
        pred = rng.random(shape) < rng.uniform(0.0, 0.5)
        gt = rng.random(shape) < rng.uniform(0.0, 0.5)
        if trial % 10 == 8:
            pred[:] = False
        if trial % 10 == 9:
            gt[:] = False
        spacing = tuple(rng.uniform(0.5, 3.0, size=3))
        row = compute_metrics(pred, gt, spacing)
        assert row.dice == pytest.approx(brute_dice(pred, gt))
        expected_hd = brute_hausdorff(pred, gt, spacing)
        if math.isnan(expected_hd):
            assert math.isnan(row.hausdorff_mm)
        else:
            assert row.hausdorff_mm == pytest.approx(expected_hd, rel=1e-9)
        counts = (row.lesion_tp, row.lesion_fp, row.lesion_fn)
        assert counts == brute_lesion_counts(pred, gt)


# ---------------------------------------------------------------------------
# size-binned metrics
# ---------------------------------------------------------------------------


class TestSizeBinnedMetrics:
    def _masks(self):
        gt = np.zeros((12, 12, 4))
        pred = np.zeros((12, 12, 4))
        gt[0, 0:2, 0] = 1  # small component, 2 voxels
        gt[6:9, 6:9, 0:2] = 1  # large component, 18 voxels
        pred[0, 0:2, 0] = 1  # covers the small one fully
        pred[6:9, 6:9, 0] = 1  # covers 9 of 18 large voxels
        pred[11, 0:3, 3] = 1  # 3-voxel false positive
        pred[0:2, 10:12, 2:4] = 1  # 8-voxel false positive
        return pred, gt

    def test_per_bin_rows(self):
        pred, gt = self._masks()
        rows = size_binned_metrics(pred, gt, (1.0, 1.0, 1.0), [0, 5, 100])
        assert [r.size_bin for r in rows] == ["[0,5)", "[5,100)"]

        small, large = rows
        # small bin: restricted to the 2-voxel component, fully matched
        assert small.dice == 1.0
        assert (small.lesion_tp, small.lesion_fn) == (1, 0)
        # the 3-voxel false positive lands in [0,5)
        assert small.lesion_fp == 1

        # large bin: 9 of 18 voxels matched inside the bin mask
        assert large.dice == pytest.approx(2 * 9 / (9 + 18))
        assert (large.lesion_tp, large.lesion_fn) == (1, 0)
        # the 8-voxel false positive lands in [5,100)
        assert large.lesion_fp == 1

    def test_bins_are_half_open(self):
        gt = np.zeros((8, 8, 2))
        gt[0, 0:4, 0] = 1  # exactly 4 voxels
        rows = size_binned_metrics(gt, gt, (1.0, 1.0, 1.0), [0, 4, 8])
        # the 4 mm3 component belongs to [4,8), not [0,4)
        assert rows[0].lesion_tp == 0
        assert rows[0].dice == 1.0  # both restrictions empty
        assert rows[1].lesion_tp == 1

    def test_bad_bins(self):
        z = np.zeros((4, 4, 4))
        with pytest.raises(VoxsegError, match="ascending"):
            size_binned_metrics(z, z, (1.0, 1.0, 1.0), [10, 5])
        with pytest.raises(VoxsegError, match="two edges"):
            size_binned_metrics(z, z, (1.0, 1.0, 1.0), [10])


# ---------------------------------------------------------------------------
# threshold search
# ---------------------------------------------------------------------------


class TestOptimalThreshold:
    def _separable(self):
        gt = np.zeros((1, 8, 8, 2))
        gt[:, 2:6, 2:6, :] = 1
        soft = np.where(gt > 0, 0.9, 0.1)
        return [soft, soft.copy()], [gt, gt.copy()]

    @pytest.mark.parametrize("criterion", ["metric_max", "roc"])
    def test_picks_smallest_separating_candidate(self, criterion):
        preds, gts = self._separable()
        # 0.10 keeps background (0.1 >= 0.1); 0.15 is the first clean cut
        assert optimal_threshold(preds, gts, 0.05, criterion) == pytest.approx(0.15)

    def test_single_candidate_grid(self):
        preds, gts = self._separable()
        assert optimal_threshold(preds, gts, 0.5, "metric_max") == pytest.approx(0.5)

    def test_tie_resolves_to_smallest(self):
        gt = np.zeros((4, 4))
        gt[1:3, 1:3] = 1
        soft = gt.astype(float)  # every threshold gives the same binary
        assert optimal_threshold([soft], [gt], 0.2, "metric_max") == pytest.approx(0.2)
        assert optimal_threshold([soft], [gt], 0.2, "roc") == pytest.approx(0.2)

    def test_validation(self):
        gt = np.zeros((2, 2))
        with pytest.raises(VoxsegError, match="equally many"):
            optimal_threshold([], [], 0.1, "metric_max")
        with pytest.raises(VoxsegError, match="equally many"):
            optimal_threshold([gt], [gt, gt], 0.1, "metric_max")
        with pytest.raises(VoxsegError, match="step"):
            optimal_threshold([gt], [gt], 0.0, "metric_max")
        with pytest.raises(VoxsegError, match="step"):
            optimal_threshold([gt], [gt], 1.0, "metric_max")
        with pytest.raises(VoxsegError, match="criterion"):
            optimal_threshold([gt], [gt], 0.1, "youden")


# ---------------------------------------------------------------------------
# segment_volume
# ---------------------------------------------------------------------------


class _VoxelwiseNet(torch.nn.Module):
    """Position-independent stand-in: sigmoid of the first input channel."""

    def forward(self, x):
        return torch.sigmoid(x[:, :1])


def _inference_config(tmp_path, **overrides):
    return ExperimentConfig(base_config("unused", tmp_path, **overrides))


class TestSegmentVolume:
    def test_slice_and_volume_modes_agree(self, tmp_path):
        rng = np.random.default_rng(3)
        volume = _vol(rng.normal(size=(16, 16, 8)))
        model = _VoxelwiseNet()
        by_slice = segment_volume(model, volume, _inference_config(tmp_path))
        by_volume = segment_volume(
            model, volume, _inference_config(tmp_path, **{"loader.mode": "volume"})
        )
        np.testing.assert_array_equal(by_slice.data, by_volume.data)
        assert by_slice.shape == volume.shape
        assert by_slice.channels == 1
        assert float(by_slice.data.min()) >= 0.0
        assert float(by_slice.data.max()) <= 1.0

    def test_restores_native_geometry(self, tmp_path):
        rng = np.random.default_rng(4)
        spacing = (1.0, 1.0, 2.0)
        affine = np.diag([1.0, 1.0, 2.0, 1.0])
        affine[:3, 3] = (5.0, -3.0, 2.5)
        volume = Volume(
            data=rng.normal(size=(1, 16, 16, 8)).astype(np.float32),
            spacing=spacing,
            affine=affine,
        )
        cfg = _inference_config(
            tmp_path,
            transforms=[
                {"name": "resample", "params": {"target_spacing": [2.0, 2.0, 2.0]}},
                {"name": "crop_or_pad", "params": {"target_shape": [6, 6, 6]}},
                {"name": "normalize_zscore", "params": {}},
            ],
        )
        out = segment_volume(_VoxelwiseNet(), volume, cfg)
        assert out.shape == volume.shape
        assert out.spacing == volume.spacing
        np.testing.assert_array_equal(out.affine, volume.affine)
        assert float(out.data.min()) >= 0.0
        assert float(out.data.max()) <= 1.0

    def test_runs_a_real_model(self, trained_run):
        config, out_dir = trained_run
        model, _ = load_model(out_dir / "best_model")
        rng = np.random.default_rng(5)
        volume = _vol(rng.normal(size=(32, 32, 8)))
        out = segment_volume(model, volume, config)
        assert out.shape == volume.shape
        assert 0.0 <= float(out.data.min()) <= float(out.data.max()) <= 1.0
        # deterministic: no stochastic modules are flipped on
        again = segment_volume(model, volume, config)
        np.testing.assert_array_equal(out.data, again.data)


# ---------------------------------------------------------------------------
# prediction sets and stochastic sampling
# ---------------------------------------------------------------------------


def _pset(maps, spacing=(1.0, 1.0, 1.0)):
    maps = [np.asarray(m, dtype=np.float64) for m in maps]
    return PredictionSet(
        volume_id="v",
        soft_maps=maps,
        mean_map=maps[0],
        source="epistemic",
        spacing=spacing,
        affine=np.diag(list(spacing) + [1.0]),
    )


class TestPredictionSet:
    def test_shape_agreement_enforced(self):
        good = np.zeros((1, 2, 2, 2))
        bad = np.zeros((1, 2, 2, 3))
        with pytest.raises(VoxsegError, match="disagree"):
            _pset([good, bad])

    def test_value_range_enforced(self):
        out_of_range = np.full((1, 2, 2, 2), 1.5)
        with pytest.raises(VoxsegError, match=r"\[0, 1\]"):
            _pset([out_of_range, out_of_range])

    def test_as_volume_carries_geometry(self):
        pset = _pset([np.full((1, 2, 2, 2), 0.25)] * 2, spacing=(1.0, 2.0, 3.0))
        vol = pset.as_volume(pset.mean_map)
        assert vol.data.dtype == np.float32
        assert vol.spacing == (1.0, 2.0, 3.0)
        np.testing.assert_array_equal(vol.data, np.full((1, 2, 2, 2), 0.25))


class TestSamplePredictions:
    @pytest.fixture()
    def native(self):
        rng = np.random.default_rng(11)
        return _vol(rng.normal(size=(32, 32, 8)))

    def test_epistemic_varies_and_is_seeded(self, trained_run, native):
        config, out_dir = trained_run
        model, _ = load_model(out_dir / "best_model")
        pset = sample_predictions(model, native, "epistemic", 3, config, seed=5)
        assert pset.source == "epistemic"
        assert len(pset.soft_maps) == 3
        assert pset.mean_map.shape == (1, 32, 32, 8)
        # dropout stays active across passes, so samples differ
        assert not np.array_equal(pset.soft_maps[0], pset.soft_maps[1])
        # deterministic per seed
        again = sample_predictions(model, native, "epistemic", 3, config, seed=5)
        np.testing.assert_array_equal(pset.mean_map, again.mean_map)
        other = sample_predictions(model, native, "epistemic", 3, config, seed=6)
        assert not np.array_equal(pset.mean_map, other.mean_map)
        # evaluation mode is restored afterwards
        assert not model.training
        assert all(not m.training for m in model.modules())

    def test_epistemic_needs_dropout(self, trained_run, native):
        config, _ = trained_run
        dry = build_model(ModelSpec(architecture="unet2d", depth=2,
                                    base_filters=8, dropout_rate=0.0))
        with pytest.raises(VoxsegError, match="dropout"):
            sample_predictions(dry, native, "epistemic", 2, config, seed=0)

    def test_needs_two_samples(self, trained_run, native):
        config, out_dir = trained_run
        model, _ = load_model(out_dir / "best_model")
        with pytest.raises(VoxsegError, match="at least 2"):
            sample_predictions(model, native, "epistemic", 1, config, seed=0)

    def test_unknown_mode(self, trained_run, native):
        config, out_dir = trained_run
        model, _ = load_model(out_dir / "best_model")
        with pytest.raises(VoxsegError, match="unknown sampling mode"):
            sample_predictions(model, native, "structural", 2, config, seed=0)

    def test_aleatoric_needs_invertible_augmentation(self, trained_run, native):
        config, out_dir = trained_run
        model, _ = load_model(out_dir / "best_model")
        with pytest.raises(VoxsegError, match="affine_augment"):
            sample_predictions(model, native, "aleatoric", 2, config, seed=0)

    def test_aleatoric_varies_and_is_seeded(self, trained_run, native, tmp_path):
        _, out_dir = trained_run
        model, _ = load_model(out_dir / "best_model")
        cfg = _inference_config(
            tmp_path,
            transforms=[
                {"name": "normalize_zscore", "params": {}},
                {"name": "affine_augment",
                 "params": {"rotation_deg_range": 10.0,
                            "scale_range": (0.95, 1.05),
                            "translation_vox_range": 2.0}},
            ],
        )
        pset = sample_predictions(model, native, "aleatoric", 3, cfg, seed=9)
        assert pset.source == "aleatoric"
        assert len(pset.soft_maps) == 3
        assert not np.array_equal(pset.soft_maps[0], pset.soft_maps[1])
        assert float(np.min(pset.mean_map)) >= 0.0
        assert float(np.max(pset.mean_map)) <= 1.0
        again = sample_predictions(model, native, "aleatoric", 3, cfg, seed=9)
        np.testing.assert_array_equal(pset.mean_map, again.mean_map)
        assert not model.training


# ---------------------------------------------------------------------------
# uncertainty maps
# ---------------------------------------------------------------------------


class TestVoxelUncertainty:
    def test_entropy_of_vote_fractions(self):
        a = np.array([[[[0.9]], [[0.1]], [[0.6]], [[0.0]]]])  # (1,4,1,1)
        b = np.array([[[[0.8]], [[0.1]], [[0.2]], [[0.0]]]])
        c = np.array([[[[0.7]], [[0.9]], [[0.2]], [[0.0]]]])
        d = np.array([[[[0.6]], [[0.9]], [[0.2]], [[0.0]]]])
        out = voxel_uncertainty(_pset([a, b, c, d]), "entropy").data
        # unanimous foreground and unanimous background are exactly zero
        assert out[0, 0, 0, 0] == 0.0
        assert out[0, 3, 0, 0] == 0.0
        # 2/4 votes -> ln 2
        assert out[0, 1, 0, 0] == pytest.approx(math.log(2), rel=1e-6)
        # 1/4 votes
        expected = -(0.25 * math.log(0.25) + 0.75 * math.log(0.75))
        assert out[0, 2, 0, 0] == pytest.approx(expected, rel=1e-6)

    def test_variance_and_cv_match_numpy(self):
        rng = np.random.default_rng(13)
        maps = [rng.random((2, 3, 3, 2)) for _ in range(5)]
        stack = np.stack(maps)
        var = voxel_uncertainty(_pset(maps), "variance").data
        np.testing.assert_allclose(var, stack.var(axis=0), rtol=1e-6)
        cv = voxel_uncertainty(_pset(maps), "cv").data
        np.testing.assert_allclose(
            cv, stack.std(axis=0) / (stack.mean(axis=0) + 1e-8), rtol=1e-6
        )

    def test_unknown_measure(self):
        maps = [np.zeros((1, 2, 2, 2))] * 2
        with pytest.raises(VoxsegError, match="unknown uncertainty measure"):
            voxel_uncertainty(_pset(maps), "spread")


class TestObjectUncertainty:
    def test_component_scores(self):
        shape = (1, 10, 3, 3)
        half = np.zeros(shape)
        half[0, 0:3, 0, 0] = 1.0  # disagreement region: half the samples vote
        sure = np.zeros(shape)
        sure[0, 7:9, 0, 0] = 1.0  # unanimous region
        maps = [half + sure, sure.copy(), half + sure, sure.copy()]
        pset = _pset(maps, spacing=(1.0, 2.0, 1.0))
        binary = _vol(np.zeros((10, 3, 3)), spacing=(1.0, 2.0, 1.0))
        binary.data[0, 0:3, 0, 0] = 1
        binary.data[0, 7:9, 0, 0] = 1
        rows = object_uncertainty(pset, binary, measure="entropy")
        assert len(rows) == 2
        first, second = rows
        assert first["class_index"] == 0 and first["object_id"] == 1
        assert first["volume_mm3"] == pytest.approx(3 * 2.0)
        assert first["score"] == pytest.approx(math.log(2), rel=1e-6)
        assert second["object_id"] == 2
        assert second["volume_mm3"] == pytest.approx(2 * 2.0)
        assert second["score"] == 0.0

    def test_empty_prediction(self):
        pset = _pset([np.zeros((1, 4, 4, 2))] * 2)
        rows = object_uncertainty(pset, _vol(np.zeros((4, 4, 2))))
        assert rows == []


# ---------------------------------------------------------------------------
# post-processing
# ---------------------------------------------------------------------------


class TestPostprocess:
    def _soft(self):
        data = np.zeros((6, 6, 2))
        data[1:3, 1:3, :] = 0.8
        data[4, 4, :] = 0.3
        return _vol(data)

    def test_threshold_step(self):
        out = postprocess(self._soft(), [{"name": "threshold", "params": {"t": 0.7}}])
        assert out.data.dtype == np.float32
        np.testing.assert_array_equal(out.data, (self._soft().data >= 0.7).astype(np.float32))

    def test_threshold_rebinarizes_from_soft_values(self):
        steps = [
            {"name": "threshold", "params": {"t": 0.9}},
            {"name": "threshold", "params": {"t": 0.2}},
        ]
        out = postprocess(self._soft(), steps)
        # the second threshold reads the soft map, not the first binarization
        np.testing.assert_array_equal(out.data, (self._soft().data >= 0.2).astype(np.float32))

    def test_no_threshold_step_defaults_to_half(self):
        out = postprocess(self._soft(), [])
        np.testing.assert_array_equal(out.data, (self._soft().data >= 0.5).astype(np.float32))

    def test_steps_before_threshold_binarize_at_half(self):
        out = postprocess(self._soft(), [{"name": "keep_largest"}])
        # the 0.3 voxel never enters; only the 0.8 blob remains
        expected = (self._soft().data >= 0.5).astype(np.float32)
        np.testing.assert_array_equal(out.data, expected)

    def test_fill_holes(self):
        shell = np.zeros((7, 7, 7))
        shell[1:6, 1:6, 1:6] = 1
        shell[3, 3, 3] = 0
        out = postprocess(_vol(shell), [{"name": "fill_holes"}])
        assert out.data[0, 3, 3, 3] == 1.0
        assert out.data.sum() == 5 ** 3

    def test_remove_small_uses_physical_volume(self):
        data = np.zeros((10, 4, 4))
        data[0:2, 0, 0] = 1  # 2 voxels = 4 mm3 at 2 mm spacing
        data[5:9, 0:2, 0] = 1  # 8 voxels = 16 mm3
        out = postprocess(
            _vol(data, spacing=(2.0, 1.0, 1.0)),
            [{"name": "remove_small", "params": {"min_mm3": 5.0}}],
        )
        assert out.data[0, 0:2, 0, 0].sum() == 0
        assert out.data[0, 5:9, 0:2, 0].sum() == 8

    def test_keep_largest(self):
        data = np.zeros((10, 4, 4))
        data[0:3, 0, 0] = 1
        data[5:9, 0:2, 0] = 1
        out = postprocess(_vol(data), [{"name": "keep_largest"}])
        assert out.data[0, 0:3, 0, 0].sum() == 0
        assert out.data.sum() == 8

    def test_uncertainty_threshold(self):
        data = np.zeros((6, 4, 4))
        data[1:5, 1:3, 1:3] = 1
        unc = _vol(np.zeros((6, 4, 4)))
        unc.data[0, 1:3, :, :] = 0.9
        out = postprocess(
            _vol(data),
            [{"name": "uncertainty_threshold", "params": {"u_max": 0.5}}],
            uncertainty=unc,
        )
        assert out.data[0, 1:3].sum() == 0
        assert out.data[0, 3:5, 1:3, 1:3].sum() == 2 * 2 * 2

    def test_uncertainty_threshold_needs_map(self):
        with pytest.raises(VoxsegError, match="uncertainty map"):
            postprocess(self._soft(),
                        [{"name": "uncertainty_threshold", "params": {"u_max": 0.5}}])

    def test_unknown_step(self):
        with pytest.raises(VoxsegError, match="unknown postprocess step"):
            postprocess(self._soft(), [{"name": "erode"}])

    def test_unknown_step_keys(self):
        with pytest.raises(VoxsegError, match="unknown keys"):
            postprocess(self._soft(), [{"name": "fill_holes", "radius": 2}])

    def test_threshold_range(self):
        with pytest.raises(VoxsegError, match=r"\(0, 1\]"):
            postprocess(self._soft(), [{"name": "threshold", "params": {"t": 0.0}}])
        with pytest.raises(VoxsegError, match=r"\(0, 1\]"):
            postprocess(self._soft(), [{"name": "threshold", "params": {"t": 1.5}}])
        out = postprocess(self._soft(), [{"name": "threshold", "params": {"t": 1.0}}])
        assert out.data.sum() == 0


# ---------------------------------------------------------------------------
# report writing
# ---------------------------------------------------------------------------


class TestWriteReport:
    def test_columns_sorting_and_formatting(self, tmp_path):
        rows = [
            EvalRow(subject_id="sub-02", class_index=0, dice=0.5),
            EvalRow(subject_id="sub-01", class_index=1, dice=0.25),
            EvalRow(subject_id="sub-01", class_index=0, size_bin="[0,5)",
                    dice=0.123456789, lesion_tp=3),
            EvalRow(subject_id="sub-01", class_index=0, dice=1.0),
        ]
        path = write_report(rows, tmp_path / "report.csv")
        with open(path, newline="") as fh:
            parsed = list(csv.reader(fh))
        assert parsed[0] == list(REPORT_COLUMNS)
        assert REPORT_COLUMNS[:3] == ("subject_id", "class_index", "size_bin")
        keys = [(r[0], r[1], r[2]) for r in parsed[1:]]
        assert keys == [
            ("sub-01", "0", "[0,5)"),
            ("sub-01", "0", "all"),
            ("sub-01", "1", "all"),
            ("sub-02", "0", "all"),
        ]
        binned = parsed[1]
        as_dict = dict(zip(parsed[0], binned))
        assert as_dict["dice"] == "0.123457"  # 6 significant digits
        assert as_dict["lesion_tp"] == "3"
        assert as_dict["precision"] == "nan"

    def test_empty_report_has_header_only(self, tmp_path):
        path = write_report([], tmp_path / "empty.csv")
        lines = path.read_text().strip().splitlines()
        assert lines == [",".join(REPORT_COLUMNS)]


# ---------------------------------------------------------------------------
# end-to-end test runs
# ---------------------------------------------------------------------------


def _eval_config(trained_run, out_dir, **dotted):
    _, run_dir = trained_run
    raw = json.loads((run_dir / "base_config.json").read_text())
    overrides = {"output.path": str(out_dir)}
    overrides.update(dotted)
    return ExperimentConfig(override_config(raw, overrides))


class TestRunTest:
    def test_writes_report_and_predictions(self, trained_run, tmp_path):
        out = tmp_path / "eval"
        cfg = _eval_config(trained_run, out,
                           **{"evaluation.bins_mm3": [0.0, 200.0, 1e9]})
        _, run_dir = trained_run
        mean_dice, rows = run_test(cfg, run_dir / "best_model")

        preds = sorted(out.glob("*_pred.nii.gz"))
        assert len(preds) == 2  # test bucket of a 10-subject 60/20/20 split
        report = out / "results_eval.csv"
        assert report.exists()

        # one whole-volume row plus two binned rows per subject and class
        assert len(rows) == 2 * 3
        whole = [r for r in rows if r.size_bin == "all"]
        assert len(whole) == 2
        assert mean_dice == pytest.approx(float(np.nanmean([r.dice for r in whole])))
        assert 0.0 <= mean_dice <= 1.0

        # predictions are binary volumes in native geometry
        vol = read_nifti(preds[0])
        assert vol.shape == (32, 32, 8)
        assert set(np.unique(vol.data)) <= {0.0, 1.0}

        with open(report, newline="") as fh:
            parsed = list(csv.reader(fh))
        assert parsed[0] == list(REPORT_COLUMNS)
        assert len(parsed) == 1 + len(rows)

    def test_threshold_search_is_applied(self, trained_run, tmp_path, caplog):
        out = tmp_path / "eval_search"
        cfg = _eval_config(trained_run, out,
                           **{"evaluation.threshold": "search",
                              "evaluation.search_step": 0.25})
        _, run_dir = trained_run
        with caplog.at_level("INFO", logger="voxseg.evaluation"):
            mean_dice, rows = run_test(cfg, run_dir / "best_model")
        assert any("threshold search selected" in r.message for r in caplog.records)
        assert math.isfinite(mean_dice)
        assert len(rows) == 2

    def test_epistemic_uncertainty_outputs(self, trained_run, tmp_path):
        out = tmp_path / "eval_unc"
        cfg = _eval_config(trained_run, out,
                           **{"uncertainty.mode": "epistemic",
                              "uncertainty.n_samples": 2,
                              "uncertainty.measures": ["entropy"]})
        _, run_dir = trained_run
        mean_dice, rows = run_test(cfg, run_dir / "best_model")
        unc_files = sorted(out.glob("*_unc-entropy.nii.gz"))
        assert len(unc_files) == 2
        unc = read_nifti(unc_files[0])
        assert unc.shape == (32, 32, 8)
        assert float(unc.data.min()) >= 0.0
        assert len(sorted(out.glob("*_pred.nii.gz"))) == 2
        assert math.isfinite(mean_dice)

    def test_cascade_detector_path(self, small_bids, tmp_path):
        root, _ = small_bids
        det_dir = tmp_path / "detector"
        seg_dir = tmp_path / "segmenter"
        spec = ModelSpec(architecture="unet3d", depth=2, base_filters=4,
                         dropout_rate=0.0)
        torch.manual_seed(0)
        save_model(det_dir, build_model(spec))
        torch.manual_seed(1)
        save_model(seg_dir, build_model(spec))

        out = tmp_path / "eval_cascade"
        cfg = ExperimentConfig(base_config(
            root, out,
            **{"loader.mode": "volume",
               "model.architecture": "unet3d",
               "model.base_filters": 4,
               "cascade.detector_path": str(det_dir)},
        ))
        mean_dice, rows = run_test(cfg, seg_dir)
        assert len(rows) == 2
        assert len(sorted(out.glob("*_pred.nii.gz"))) == 2
        assert math.isfinite(mean_dice)

    def test_requires_bids_path(self, trained_run, tmp_path):
        cfg = _eval_config(trained_run, tmp_path / "nowhere",
                           **{"loader.bids_path": None})
        _, run_dir = trained_run
        with pytest.raises(VoxsegError, match="bids_path"):
            run_test(cfg, run_dir / "best_model")
