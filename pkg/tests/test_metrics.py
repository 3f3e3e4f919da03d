"""Tests for the evaluation metrics: embedders, instance-matched similarity
(vims), background similarity (bas), judge-rated operation success (osr),
and the Frechet distances (fid / fvd), plus the embedding sidecar format."""

import dataclasses
import sys
import warnings

import numpy as np
import pytest

from splatsim.errors import MetricError
from splatsim.metrics import (
    CommandJudge,
    ConstantJudge,
    EvalBundle,
    HashingJudge,
    MetricWarning,
    OsrItem,
    SidecarEmbedder,
    ToyClipEmbedder,
    ToyEmbedder,
    annotate_frame,
    annotated_frames,
    bas,
    bundle_from_scene,
    fid,
    fid_from_moments,
    fit_feature_moments,
    frame_features,
    fvd,
    load_embedding_table,
    mask_crop,
    osr,
    osr_frame_indices,
    osr_with_flags,
    region_key,
    save_embedding_table,
    vims,
    vims_with_stats,
    write_judge_query,
)
from splatsim.scene.types import (
    EGO_ID,
    BoundingBox3D,
    CameraModel,
    FrameBuffer,
    FrameSequence,
    InstanceMaskSequence,
    Pose,
    Trajectory,
)

CAM = CameraModel(fx=30.0, fy=30.0, cx=20.0, cy=15.0, width=40, height=30,
                  near=0.1, far=100.0)
# camera at the ego origin looking along +x
CAM_IN_EGO = Pose(np.array([0.5, -0.5, 0.5, -0.5]), np.zeros(3))

A_COLOR = (0.9, 0.2, 0.1)
B_COLOR = (0.1, 0.3, 0.9)


def square_mask(rows, cols, h=30, w=40):
    m = np.zeros((h, w), dtype=bool)
    m[rows[0]:rows[1], cols[0]:cols[1]] = True
    return m


A_MASK = square_mask((11, 19), (9, 17))
B_MASK = square_mask((11, 19), (24, 32))


def still(translation, times, yaw=0.0):
    pose = Pose.from_yaw(yaw, translation)
    return Trajectory(np.asarray(times, dtype=float), [pose] * len(times))


def gradient_bg(shift=0.0, h=30, w=40):
    img = np.zeros((h, w, 3))
    img[..., 0] = np.linspace(0.0, 1.0, w)[None, :]
    img[..., 1] = 1.0 - img[..., 0]
    img[..., 2] = 0.4 + shift
    return img


def paint(img, mask, color):
    out = img.copy()
    out[mask] = color
    return out


def to_frame(rgb):
    h, w = rgb.shape[:2]
    return FrameBuffer(rgb, np.full((h, w), 10.0),
                       np.full((h, w), -1, dtype=np.int32))


def make_video(images, times=None):
    if times is None:
        times = np.arange(len(images), dtype=float)
    return FrameSequence(tuple(to_frame(im) for im in images),
                         np.asarray(times, dtype=float))


def two_car_bundle(n_frames=3):
    """Two visually distinct vehicles straddling the optical axis."""
    times = np.arange(n_frames, dtype=float)
    images = [paint(paint(gradient_bg(0.15 * t), A_MASK, A_COLOR),
                    B_MASK, B_COLOR) for t in range(n_frames)]
    masks = InstanceMaskSequence(tuple({"a": A_MASK, "b": B_MASK}
                                       for _ in range(n_frames)))
    unit_box = BoundingBox3D(np.array([1.0, 1.0, 1.0]))
    # a moving ego disambiguates the per-frame pose matching
    ego = Trajectory(times, [Pose.from_yaw(0.0, (0.3 * t, 0, 0))
                             for t in range(n_frames)])
    return EvalBundle(
        video=make_video(images, times),
        masks=masks,
        trajectories={EGO_ID: ego,
                      "a": still((8, 2, 0), times),
                      "b": still((8, -2, 0), times)},
        boxes={"a": unit_box, "b": unit_box},
        camera=CAM,
        camera_in_ego=CAM_IN_EGO,
    )


def swap_masks(bundle):
    swapped = tuple({"a": d["b"], "b": d["a"]} for d in bundle.masks.masks)
    return dataclasses.replace(bundle, masks=InstanceMaskSequence(swapped))


def relabel(bundle, mapping):
    masks = tuple({mapping.get(k, k): v for k, v in d.items()}
                  for d in bundle.masks.masks)
    return dataclasses.replace(
        bundle,
        masks=InstanceMaskSequence(masks),
        trajectories={mapping.get(k, k): v
                      for k, v in bundle.trajectories.items()},
        boxes={mapping.get(k, k): v for k, v in bundle.boxes.items()})


def background_only_bundle(shifts, ego_positions):
    times = np.arange(len(shifts), dtype=float)
    video = make_video([gradient_bg(s) for s in shifts], times)
    poses = [Pose.from_yaw(0.0, p) for p in ego_positions]
    return EvalBundle(
        video=video,
        masks=InstanceMaskSequence(tuple({} for _ in shifts)),
        trajectories={EGO_ID: Trajectory(times, poses)},
        boxes={},
        camera=CAM,
        camera_in_ego=CAM_IN_EGO,
    )


class TestToyEmbedder:
    def test_dimension_and_identity(self):
        emb = ToyEmbedder()
        assert emb.dim == 56
        assert "toy" in emb.identity

    def test_unit_norm(self, rng):
        emb = ToyEmbedder()
        for _ in range(5):
            feat = emb.embed(rng.uniform(0, 1, (17, 23, 3)))
            assert feat.shape == (56,)
            assert abs(np.linalg.norm(feat) - 1.0) < 1e-6

    def test_deterministic(self, rng):
        img = rng.uniform(0, 1, (10, 12, 3))
        emb = ToyEmbedder()
        assert emb.embed(img).tobytes() == emb.embed(img).tobytes()

    def test_all_black_image_still_unit(self):
        feat = ToyEmbedder().embed(np.zeros((8, 8, 3)))
        assert abs(np.linalg.norm(feat) - 1.0) < 1e-12

    def test_rejects_wrong_shape(self):
        with pytest.raises(MetricError, match="embedder expects"):
            ToyEmbedder().embed(np.zeros((8, 8)))


class TestMaskCrop:
    def test_crops_to_mask_bounds_and_blacks_outside(self, rng):
        rgb = rng.uniform(0.2, 1.0, (20, 30, 3))
        mask = np.zeros((20, 30), dtype=bool)
        mask[5:9, 10:14] = True
        mask[6, 20] = True
        crop = mask_crop(rgb, mask)
        assert crop.shape == (4, 11, 3)
        np.testing.assert_array_equal(crop[0, 0], rgb[5, 10])
        # pixel inside the rectangle but outside the mask is blacked
        np.testing.assert_array_equal(crop[0, 5], 0.0)

    def test_empty_mask_gives_none(self):
        assert mask_crop(np.zeros((4, 4, 3)), np.zeros((4, 4), bool)) is None

    def test_shape_mismatch_raises(self):
        with pytest.raises(MetricError, match="mask shape"):
            mask_crop(np.zeros((4, 4, 3)), np.zeros((4, 5), bool))


class TestVims:
    def test_identical_bundles_score_one(self):
        bundle = two_car_bundle()
        assert vims(bundle, bundle) == pytest.approx(1.0, abs=1e-6)

    def test_swapped_masks_score_strictly_lower(self):
        gt = two_car_bundle()
        gen = swap_masks(gt)
        swapped = vims(gen, gt)
        assert swapped < vims(gt, gt)
        assert -1.0 <= swapped <= 1.0

    def test_relabeling_invariance(self):
        gt = two_car_bundle()
        gen = swap_masks(gt)
        mapping = {"a": "lead", "b": "oncoming"}
        assert vims(relabel(gen, mapping), relabel(gt, mapping)) == \
            pytest.approx(vims(gen, gt), abs=1e-12)

    def test_instance_occluded_in_all_gt_frames_is_skipped(self):
        """A third vehicle hidden behind a larger one in every gt frame
        contributes skip counts, not scores."""
        times = np.arange(3, dtype=float)
        c_mask = square_mask((13, 16), (18, 21))
        img = paint(paint(paint(gradient_bg(), A_MASK, A_COLOR),
                          B_MASK, B_COLOR), c_mask, (0.2, 0.8, 0.2))
        video = make_video([img] * 3, times)
        masks = InstanceMaskSequence(
            tuple({"a": A_MASK, "b": B_MASK, "c": c_mask} for _ in times))
        boxes = {"a": BoundingBox3D(np.array([3.0, 3.0, 3.0])),
                 "b": BoundingBox3D(np.array([1.0, 1.0, 1.0])),
                 "c": BoundingBox3D(np.array([1.0, 1.0, 1.0]))}

        def bundle(a_pos):
            return EvalBundle(
                video=video, masks=masks,
                trajectories={EGO_ID: still((0, 0, 0), times),
                              "a": still(a_pos, times),
                              "b": still((8, -2, 0), times),
                              "c": still((12, 2, 0), times)},
                boxes=boxes, camera=CAM, camera_in_ego=CAM_IN_EGO)

        gt = bundle((8, 2, 0))     # big box in front of c: fully covered
        gen = bundle((8, 6, 0))    # a moved aside, c visible in gen
        score, skipped = vims_with_stats(gen, gt)
        assert skipped == 3
        without_c = {k: v for k, v in boxes.items() if k != "c"}
        expected = vims(dataclasses.replace(gen, boxes=without_c),
                        dataclasses.replace(gt, boxes=without_c))
        assert score == pytest.approx(expected, abs=1e-12)

    def test_occluded_gt_frame_is_never_matched(self):
        """gt frame 1 is the exact pose match but is occluded there; the
        matcher must fall back to frame 0, whose appearance differs."""
        j_mask = A_MASK
        red = paint(gradient_bg(), j_mask, A_COLOR)
        blue = paint(gradient_bg(), j_mask, B_COLOR)
        gt_times = np.array([0.0, 1.0])
        gt = EvalBundle(
            video=make_video([red, blue], gt_times),
            masks=InstanceMaskSequence(({"j": j_mask}, {"j": j_mask})),
            trajectories={
                EGO_ID: still((0, 0, 0), gt_times),
                "j": Trajectory(gt_times, [Pose.from_yaw(0, (8, 2.5, 0)),
                                           Pose.from_yaw(0, (8, 2, 0))]),
                # occluder swings in front of j only at t=1
                "o": Trajectory(gt_times, [Pose.from_yaw(0, (6, 30, 0)),
                                           Pose.from_yaw(0, (6, 2, 0))]),
            },
            boxes={"j": BoundingBox3D(np.array([1.0, 1.0, 1.0])),
                   "o": BoundingBox3D(np.array([3.0, 3.0, 3.0]))},
            camera=CAM, camera_in_ego=CAM_IN_EGO)
        gen = EvalBundle(
            video=make_video([blue], [0.0]),
            masks=InstanceMaskSequence(({"j": j_mask},)),
            trajectories={EGO_ID: still((0, 0, 0), [0.0]),
                          "j": still((8, 2, 0), [0.0])},
            boxes={"j": BoundingBox3D(np.array([1.0, 1.0, 1.0]))},
            camera=CAM, camera_in_ego=CAM_IN_EGO)
        # a match to the occluded frame 1 would score 1.0 exactly
        assert vims(gen, gt) < 0.99

    def test_no_visible_instances_raises(self):
        gt = two_car_bundle()
        empty = InstanceMaskSequence(tuple({} for _ in range(len(gt))))
        gen = dataclasses.replace(gt, masks=empty)
        with pytest.raises(MetricError, match="no-valid-pairs"):
            vims(gen, gt)


class TestBas:
    def test_identical_bundles_score_one(self):
        bundle = two_car_bundle()
        assert bas(bundle, bundle) == pytest.approx(1.0, abs=1e-6)

    def test_noise_background_scores_strictly_lower(self, rng):
        gt = two_car_bundle()
        noisy_images = []
        for t in range(len(gt)):
            img = gt.video.frames[t].rgb.copy()
            bg = ~(A_MASK | B_MASK)
            img[bg] = rng.uniform(0, 1, (int(bg.sum()), 3))
            noisy_images.append(img)
        gen = dataclasses.replace(gt, video=make_video(noisy_images))
        assert bas(gen, gt) < bas(gt, gt)

    def test_altered_dynamic_pixels_do_not_matter(self):
        gt = two_car_bundle()
        recolored = [paint(paint(f.rgb, A_MASK, (0.0, 0.0, 0.0)),
                           B_MASK, (1.0, 1.0, 1.0))
                     for f in gt.video.frames]
        gen = dataclasses.replace(gt, video=make_video(recolored))
        assert bas(gen, gt) == pytest.approx(1.0, abs=1e-6)

    def test_frames_matched_by_ego_pose_not_index(self):
        shifts = [0.0, 0.15, 0.3]
        gen = background_only_bundle(shifts, [(0, 0, 0), (1, 0, 0), (2, 0, 0)])
        gt = background_only_bundle(shifts[::-1],
                                    [(2, 0, 0), (1, 0, 0), (0, 0, 0)])
        assert bas(gen, gt) == pytest.approx(1.0, abs=1e-6)
        # sanity: frames really differ, so index pairing would not score 1
        mismatched = background_only_bundle(shifts[::-1],
                                            [(0, 0, 0), (1, 0, 0), (2, 0, 0)])
        assert bas(mismatched, gen) < 1.0 - 1e-6

    def test_empty_video_raises(self):
        empty = EvalBundle(video=FrameSequence((), np.zeros(0)),
                           masks=InstanceMaskSequence(()),
                           trajectories={EGO_ID: still((0, 0, 0), [0.0])},
                           boxes={}, camera=CAM, camera_in_ego=CAM_IN_EGO)
        with pytest.raises(MetricError, match="nonempty"):
            bas(empty, empty)


class TestEvalBundle:
    def test_mask_frame_count_mismatch(self):
        with pytest.raises(MetricError, match="mask count"):
            EvalBundle(video=make_video([gradient_bg()] * 2),
                       masks=InstanceMaskSequence(({},)),
                       trajectories={EGO_ID: still((0, 0, 0), [0, 1])},
                       boxes={}, camera=CAM, camera_in_ego=CAM_IN_EGO)

    def test_missing_ego_trajectory(self):
        with pytest.raises(MetricError, match="ego"):
            EvalBundle(video=make_video([gradient_bg()]),
                       masks=InstanceMaskSequence(({},)),
                       trajectories={"a": still((0, 0, 0), [0.0])},
                       boxes={}, camera=CAM, camera_in_ego=CAM_IN_EGO)

    def test_box_without_trajectory(self):
        with pytest.raises(MetricError, match="boxes without trajectories"):
            EvalBundle(video=make_video([gradient_bg()]),
                       masks=InstanceMaskSequence(({},)),
                       trajectories={EGO_ID: still((0, 0, 0), [0.0])},
                       boxes={"a": BoundingBox3D(np.ones(3))},
                       camera=CAM, camera_in_ego=CAM_IN_EGO)

    def test_bundle_from_scene_wires_rendered_products(self, example_scene,
                                                       example_render):
        bundle = bundle_from_scene(example_scene, example_render)
        assert len(bundle) == len(example_render)
        assert set(bundle.boxes) == {a.id for a in example_scene.assets}
        assert bundle.camera is example_scene.camera
        fb = example_render.frames[0]
        np.testing.assert_array_equal(
            bundle.masks.union_foreground(0, fb.rgb.shape[:2]),
            fb.instance_ids >= 0)


class TestOsr:
    def test_uniform_indices_81_frames(self):
        assert osr_frame_indices(81, 5) == [0, 20, 40, 60, 80]

    def test_index_edge_cases(self):
        assert osr_frame_indices(9, 5) == [0, 2, 4, 6, 8]
        assert osr_frame_indices(10, 1) == [0]
        assert osr_frame_indices(1, 5) == [0, 0, 0, 0, 0]
        assert osr_frame_indices(3, 5) == [0, 1, 1, 2, 2]
        for bad in ((0, 5), (5, 0)):
            with pytest.raises(MetricError):
                osr_frame_indices(*bad)

    @staticmethod
    def make_item(n_frames=9, kind="insertion", seed=0):
        rng = np.random.default_rng(seed)
        images = [rng.uniform(0, 1, (12, 16, 3)) for _ in range(n_frames)]
        rects = tuple((2.0, 2.0, 10.0, 9.0) for _ in range(n_frames))
        return OsrItem(video=make_video(images), task="insert a parked car",
                       kind=kind, rects=rects)

    def test_constant_judge(self):
        items = [self.make_item(seed=s) for s in range(3)]
        assert osr(items, ConstantJudge(7.0)) == 7.0

    def test_out_of_range_score_excludes_scene(self):
        class PickyJudge:
            identity = "picky"

            def judge(self, frames, task):
                return 11.0 if "remove" in task else 7.0

        good = self.make_item(seed=1)
        bad = dataclasses.replace(self.make_item(seed=2, kind="removal"),
                                  task="remove the truck")
        with pytest.warns(MetricWarning, match="unparseable-score"):
            score, flags = osr_with_flags([good, bad], PickyJudge())
        assert score == 7.0
        assert len(flags) == 1

    def test_all_scenes_excluded_raises(self):
        with pytest.warns(MetricWarning):
            with pytest.raises(MetricError, match="no-scored-scenes"):
                osr([self.make_item()], ConstantJudge(11.0))

    def test_judge_exception_excludes_scene(self):
        class FlakyJudge:
            identity = "flaky"

            def __init__(self):
                self.calls = 0

            def judge(self, frames, task):
                self.calls += 1
                if self.calls == 1:
                    raise RuntimeError("backend offline")
                return 4.0

        with pytest.warns(MetricWarning, match="judge-protocol-failure"):
            score, flags = osr_with_flags([self.make_item(seed=3),
                                           self.make_item(seed=4)],
                                          FlakyJudge())
        assert score == 4.0 and len(flags) == 1

    def test_unsampled_frames_do_not_affect_score(self):
        item = self.make_item(n_frames=9)
        judge = HashingJudge()
        base = osr([item], judge)
        assert 1.0 <= base <= 10.0
        # frame 3 is not among the sampled indices {0, 2, 4, 6, 8}
        frames = list(item.video.frames)
        frames[3] = to_frame(np.zeros((12, 16, 3)))
        tweaked = dataclasses.replace(
            item, video=FrameSequence(tuple(frames), item.video.times))
        assert osr([tweaked], judge) == base

    def test_sampled_frames_do_affect_score(self):
        class MeanJudge:
            identity = "mean"

            def judge(self, frames, task):
                return 1.0 + 8.0 * float(np.mean(frames))

        item = self.make_item(n_frames=9)
        judge = MeanJudge()
        base = osr([item], judge)
        frames = list(item.video.frames)
        frames[4] = to_frame(np.ones((12, 16, 3)))
        tweaked = dataclasses.replace(
            item, video=FrameSequence(tuple(frames), item.video.times))
        assert osr([tweaked], judge) != base

    def test_item_validation(self):
        with pytest.raises(MetricError, match="unknown operation kind"):
            dataclasses.replace(self.make_item(), kind="recolor")
        item = self.make_item()
        with pytest.raises(MetricError, match="one rect slot per frame"):
            dataclasses.replace(item, rects=item.rects[:-1])

    def test_annotate_frame_draws_box_edges(self):
        rgb = np.full((20, 20, 3), 0.5)
        out = annotate_frame(rgb, (4.0, 5.0, 15.0, 16.0), (0.0, 1.0, 0.0))
        np.testing.assert_array_equal(out[5, 4], (0.0, 1.0, 0.0))
        np.testing.assert_array_equal(out[7, 10], (0.0, 1.0, 0.0))  # top band
        np.testing.assert_array_equal(out[10, 10], (0.5, 0.5, 0.5))  # interior
        np.testing.assert_array_equal(rgb, 0.5)  # input untouched

    def test_annotate_frame_clips_to_image(self):
        rgb = np.full((10, 10, 3), 0.5)
        out = annotate_frame(rgb, (-5.0, -5.0, 30.0, 30.0), (1.0, 0.0, 0.0))
        np.testing.assert_array_equal(out[0, 0], (1.0, 0.0, 0.0))
        degenerate = annotate_frame(rgb, (8.0, 8.0, 2.0, 2.0), (1.0, 0.0, 0.0))
        np.testing.assert_array_equal(degenerate, rgb)

    def test_annotated_frames_color_by_kind(self):
        ins = self.make_item(kind="insertion")
        rem = dataclasses.replace(self.make_item(kind="removal"),
                                  task="remove it")
        green = annotated_frames(ins)[0]
        red = annotated_frames(rem)[0]
        np.testing.assert_array_equal(green[2, 5], (0.0, 1.0, 0.0))
        np.testing.assert_array_equal(red[2, 5], (1.0, 0.0, 0.0))
        bare = dataclasses.replace(ins, rects=(None,) * 9)
        np.testing.assert_array_equal(annotated_frames(bare)[0],
                                      ins.video.frames[0].rgb)

    def test_write_judge_query_layout(self, tmp_path, rng):
        frames = [rng.uniform(0, 1, (8, 8, 3)) for _ in range(2)]
        manifest = write_judge_query(frames, "check the car", tmp_path)
        assert manifest.name == "task.json"
        import json
        desc = json.loads(manifest.read_text())
        assert desc["task"] == "check the car"
        assert desc["frames"] == ["frame_00.png", "frame_01.png"]
        assert "1 and 10" in desc["answer_format"]
        for name in desc["frames"]:
            assert (tmp_path / name).read_bytes()[:4] == b"\x89PNG"

    def test_command_judge_round_trip(self):
        script = ("import json, sys\n"
                  "desc = json.load(open(sys.argv[1]))\n"
                  "assert len(desc['frames']) == 5\n"
                  "print(4.5)\n")
        judge = CommandJudge((sys.executable, "-c", script))
        assert judge.judge(annotated_frames(self.make_item()),
                           "insert a parked car") == 4.5

    def test_command_judge_unparseable_output(self):
        judge = CommandJudge((sys.executable, "-c", "print('dunno')"))
        with pytest.raises(MetricError, match="unparseable-score"):
            judge.judge([np.zeros((4, 4, 3))], "task")

    def test_failing_command_excludes_scene(self):
        judge = CommandJudge((sys.executable, "-c", "import sys; sys.exit(2)"))
        with pytest.warns(MetricWarning, match="judge-protocol-failure"):
            with pytest.raises(MetricError, match="no-scored-scenes"):
                osr([self.make_item()], judge)


class TestFid:
    def test_identical_sets_are_zero(self, rng):
        feats = [rng.standard_normal(3) for _ in range(10)]
        assert fid(feats, list(feats)) <= 1e-8

    def test_mean_shift_closed_form(self):
        assert fid_from_moments(np.array([0.0]), np.array([[1.0]]),
                                np.array([1.0]), np.array([[1.0]])) \
            == pytest.approx(1.0, abs=1e-12)

    def test_variance_change_closed_form(self):
        # 1 + 4 - 2 * sqrt(1 * 4) = 1
        assert fid_from_moments(np.array([0.0]), np.array([[1.0]]),
                                np.array([0.0]), np.array([[4.0]])) \
            == pytest.approx(1.0, abs=1e-12)

    def test_symmetric_and_nonnegative(self, rng):
        a = [rng.standard_normal(4) for _ in range(12)]
        b = [rng.standard_normal(4) + 0.3 for _ in range(15)]
        ab, ba = fid(a, b), fid(b, a)
        assert ab == pytest.approx(ba, abs=1e-8)
        assert ab >= 0.0

    def test_moment_fit_matches_numpy(self, rng):
        x = rng.standard_normal((20, 3))
        mu, cov, flagged = fit_feature_moments(list(x))
        np.testing.assert_allclose(mu, x.mean(axis=0), rtol=1e-12)
        np.testing.assert_allclose(cov, np.cov(x, rowvar=False, ddof=1),
                                   rtol=1e-12)
        assert not flagged

    def test_small_sample_regularized_and_flagged(self, rng):
        x = [rng.standard_normal(4) for _ in range(3)]
        with pytest.warns(MetricWarning, match="regularized"):
            _, cov, flagged = fit_feature_moments(x)
        assert flagged
        assert np.all(np.diag(cov) >= 1e-6)

    def test_single_sample_covariance_is_regularized_zero(self, rng):
        with pytest.warns(MetricWarning, match="regularized"):
            mu, cov, flagged = fit_feature_moments([np.array([1.0, 2.0])])
        np.testing.assert_array_equal(mu, [1.0, 2.0])
        np.testing.assert_allclose(cov, 1e-6 * np.eye(2))
        assert flagged

    def test_non_psd_product_raises(self):
        with pytest.raises(MetricError, match="non-psd-product"):
            fid_from_moments(np.array([0.0]), np.array([[1.0]]),
                             np.array([0.0]), np.array([[-1.0]]))

    def test_empty_feature_set_raises(self):
        with pytest.raises(MetricError, match="feature set"):
            fit_feature_moments([])


class TestFvd:
    def test_identical_video_sets_are_zero(self, rng):
        videos = [make_video([rng.uniform(0, 1, (8, 8, 3)) for _ in range(3)])
                  for _ in range(4)]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", MetricWarning)
            assert fvd(videos, list(videos)) <= 1e-8

    def test_temporal_shuffle_is_strictly_positive(self, rng):
        originals, shuffled = [], []
        for k in range(5):
            images = [np.full((8, 8, 3), 0.15 * i) + 0.02 * k
                      for i in range(4)]
            originals.append(make_video(images))
            shuffled.append(make_video(images[::-1]))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", MetricWarning)
            assert fvd(shuffled, originals) > 1e-6

    def test_single_frame_videos_reduce_to_frame_fid(self, rng):
        # enough samples that neither side needs covariance regularization
        gen = [make_video([rng.uniform(0, 1, (8, 8, 3))]) for _ in range(120)]
        gt = [make_video([rng.uniform(0, 1, (8, 8, 3))]) for _ in range(120)]
        frame_level = fid([f for v in gen for f in frame_features(v)],
                          [f for v in gt for f in frame_features(v)])
        assert fvd(gen, gt) == pytest.approx(frame_level, abs=1e-8)

    def test_clip_embedder_identity_string(self):
        assert "toy-clip" in ToyClipEmbedder().identity


class TestEmbeddingSidecar:
    def test_region_key_is_content_hash(self, rng):
        img = rng.uniform(0, 1, (5, 6, 3))
        assert region_key(img) == region_key(img.copy())
        assert len(region_key(img)) == 32
        assert region_key(img) != region_key(img + 1e-9)
        # shape participates even when the bytes agree
        z = np.zeros((2, 3, 3))
        assert region_key(z) != region_key(z.reshape(3, 2, 3))

    def test_round_trip(self, tmp_path, rng):
        table = {region_key(rng.uniform(0, 1, (4, 4, 3))): rng.standard_normal(7)
                 for _ in range(5)}
        path = save_embedding_table(table, tmp_path / "emb.bin")
        loaded = load_embedding_table(path)
        assert set(loaded) == set(table)
        for k in table:
            np.testing.assert_array_equal(loaded[k], table[k])

    def test_file_bytes_canonical_in_key_order(self, tmp_path, rng):
        items = [(region_key(rng.uniform(0, 1, (3, 3, 3))),
                  rng.standard_normal(4)) for _ in range(4)]
        p1 = save_embedding_table(dict(items), tmp_path / "fwd.bin")
        p2 = save_embedding_table(dict(reversed(items)), tmp_path / "rev.bin")
        assert p1.read_bytes() == p2.read_bytes()

    def test_sidecar_embedder_lookup_and_fallback(self, rng):
        img = rng.uniform(0, 1, (6, 6, 3))
        other = rng.uniform(0, 1, (6, 6, 3))
        table = {region_key(img): np.array([3.0, 4.0])}
        emb = SidecarEmbedder(table)
        np.testing.assert_allclose(emb.embed(img), [0.6, 0.8], rtol=1e-12)
        with pytest.raises(MetricError, match="missing-embedding"):
            emb.embed(other)
        with_fallback = SidecarEmbedder(table, fallback=ToyEmbedder())
        np.testing.assert_array_equal(with_fallback.embed(other),
                                      ToyEmbedder().embed(other))

    def test_from_file_label(self, tmp_path):
        path = save_embedding_table({}, tmp_path / "feat.bin")
        emb = SidecarEmbedder.from_file(path)
        assert "feat.bin" in emb.identity

    def test_load_rejects_bad_files(self, tmp_path, rng):
        bad = tmp_path / "bad.bin"
        bad.write_bytes(b"XXXX" + b"\x00" * 16)
        with pytest.raises(MetricError, match="not an embedding table"):
            load_embedding_table(bad)
        good = save_embedding_table(
            {region_key(rng.uniform(0, 1, (2, 2, 3))): np.zeros(3)},
            tmp_path / "good.bin")
        raw = good.read_bytes()
        trunc = tmp_path / "trunc.bin"
        trunc.write_bytes(raw[:-4])
        with pytest.raises(MetricError, match="truncated"):
            load_embedding_table(trunc)

    def test_save_validation(self, tmp_path):
        mixed = {b"k" * 32: np.zeros(3), b"j" * 32: np.zeros(4)}
        with pytest.raises(MetricError, match="mixed feature shapes"):
            save_embedding_table(mixed, tmp_path / "m.bin")
        with pytest.raises(MetricError, match="32-byte"):
            save_embedding_table({b"short": np.zeros(3)}, tmp_path / "s.bin")
