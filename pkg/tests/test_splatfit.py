"""Fitting tests: the analytic photometric gradient against central finite
differences, descent behavior, and the two training-pair builders."""

import dataclasses

import numpy as np
import pytest

from splatsim import edit, rasterize, splatfit
from splatsim.errors import FitError
from splatsim.rasterize import SH_C0, RenderConfig
from splatsim.scene.types import (EGO_ID, BoundingBox3D, CameraModel,
                                  GaussianField, Pose, RigidAsset, Scene,
                                  Trajectory, TriangleMesh)
from splatsim.splatfit import (ALL_PARAMS, FitConfig, FitContext, TrainingPair,
                               build_cycle_pairs, build_mesh_pairs, fit_field,
                               grad_photometric, lighting_jitter, load_pairs,
                               photometric_loss, save_pairs)

# a generous cutoff keeps the inclusion indicator exp(-cut^2/2) ~ 1e-8 at the
# boundary, so finite-difference probes cannot see indicator flips
FIT_RENDER = RenderConfig(gaussian_cutoff=6.0, background_color=(0.2, 0.25, 0.3))

FIT_CAM = CameraModel(fx=20.0, fy=20.0, cx=8.0, cy=8.0, width=16, height=16,
                      near=0.1, far=100.0)


def _dc(color):
    return (np.asarray(color, dtype=np.float64) - 0.5) / SH_C0


def static_scene(background, cam=FIT_CAM, assets=(), extra_trajs=None):
    trajs = {EGO_ID: Trajectory(np.array([0.0, 1.0]),
                                (Pose.identity(), Pose.identity()))}
    if extra_trajs:
        trajs.update(extra_trajs)
    return Scene(background=background, assets=tuple(assets),
                 trajectories=trajs, camera=cam,
                 camera_in_ego=Pose.identity(), timeline=np.array([0.0, 1.0]))


def random_field(rng, n, depth_gap=1.0):
    """Splats with every non-smooth switch kept far from its threshold:
    depths well separated, opacities in [0.3, 0.8] (no early exit with <= 5
    fragments), raw SH colors inside (0.18, 0.82) so the clamp gate is
    locked."""
    means = np.stack([rng.uniform(-1.5, 1.5, n), rng.uniform(-1.5, 1.5, n),
                      3.0 + depth_gap * np.arange(n) + rng.uniform(0, 0.4, n)],
                     axis=1)
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    sh = np.zeros((n, 4, 3))
    sh[:, 0, :] = _dc(rng.uniform(0.3, 0.7, (n, 3)))
    sh[:, 1:, :] = rng.normal(scale=0.04, size=(n, 3, 3))
    return GaussianField(means, rng.uniform(0.25, 0.8, (n, 3)), quats,
                         rng.uniform(0.3, 0.8, n), sh, frame="world")


def full_cover_field(color, opacity=1.0, depth=5.0):
    """One gaussian so large that alpha = opacity over the whole image."""
    sh = np.zeros((1, 1, 3))
    sh[0, 0] = _dc(color)
    return GaussianField(np.array([[0.0, 0.0, depth]]),
                         np.full((1, 3), 1e4), np.array([[1.0, 0, 0, 0]]),
                         np.array([opacity]), sh, frame="world")


def far_triangle_asset(asset_id, z, color):
    verts = np.array([[-6.0, -6.0, 0.0], [6.0, -6.0, 0.0], [0.0, 8.0, 0.0]])
    mesh = TriangleMesh(verts, np.array([[0, 1, 2]], dtype=np.int32),
                        np.tile(np.asarray(color, dtype=np.float64), (3, 1)))
    asset = RigidAsset(id=asset_id, klass="other",
                       box=BoundingBox3D(np.array([12.0, 16.0, 0.2])),
                       splats=None, mesh=mesh)
    pose = Pose(np.array([1.0, 0, 0, 0]), np.array([0.0, 0.0, z]))
    traj = Trajectory(np.array([0.0, 1.0]), (pose, pose))
    return asset, traj


def make_instance(seed):
    """Randomized fit problem: field to optimize, target frames, context."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 6))
    field = random_field(rng, n)
    assets, trajs = (), {}
    if seed % 3 == 0:
        # opaque mesh behind all splats exercises the mesh-occlusion terms
        asset, traj = far_triangle_asset("backdrop", 3.0 + n + 2.0,
                                         (0.55, 0.5, 0.45))
        assets, trajs = (asset,), {"backdrop": traj}
    scene = static_scene(field, assets=assets, extra_trajs=trajs)
    t_field = field.replace_params(
        means=field.means + rng.uniform(-0.05, 0.05, field.means.shape),
        sh=field.sh + np.concatenate(
            [rng.uniform(-0.3, 0.3, (n, 1, 3)), np.zeros((n, 3, 3))], axis=1))
    targets = rasterize.render_sequence(scene.replace(background=t_field),
                                        FIT_RENDER, times=[0.0])
    ctx = FitContext(scene, FIT_RENDER, times=[0.0])
    return field, targets, ctx


def fd_gradients(field, targets, ctx, h=1e-4):
    """Central finite differences of photometric_loss over every parameter."""
    def loss_of(f):
        return photometric_loss(f, targets, ctx)

    out = {}
    arrays = {"mean": field.means, "sh_dc": field.sh[:, 0, :],
              "opacity": field.opacities, "scale": field.scales,
              "rotation": field.rotations}
    for name, arr in arrays.items():
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            for sign in (1.0, -1.0):
                bumped = arr.copy()
                bumped[idx] += sign * h
                if name == "sh_dc":
                    sh = field.sh.copy()
                    sh[:, 0, :] = bumped
                    f = field.replace_params(sh=sh)
                else:
                    key = {"mean": "means", "opacity": "opacities",
                           "scale": "scales", "rotation": "rotations"}[name]
                    f = field.replace_params(**{key: bumped})
                g[idx] += sign * loss_of(f)
        out[name] = g / (2.0 * h)
    return out


def max_rel_error(analytic, fd):
    scale = max(np.abs(fd).max(), 1e-8)
    return np.abs(analytic - fd).max() / scale


class TestGradient:
    def test_zero_at_self_render(self):
        rng = np.random.default_rng(7)
        field = random_field(rng, 3)
        scene = static_scene(field)
        targets = rasterize.render_sequence(scene, FIT_RENDER, times=[0.0])
        ctx = FitContext(scene, FIT_RENDER, times=[0.0])
        grads = grad_photometric(field, targets, ctx,
                                 FitConfig(optimized_params=ALL_PARAMS))
        for name in ALL_PARAMS:
            assert np.linalg.norm(grads[name]) < 1e-8

    def test_sh_dc_sign(self):
        target_field = full_cover_field((0.4, 0.4, 0.4))
        scene = static_scene(target_field)
        targets = rasterize.render_sequence(scene, FIT_RENDER, times=[0.0])
        high = full_cover_field((0.6, 0.4, 0.4))
        grads = grad_photometric(high, targets,
                                 FitContext(scene, FIT_RENDER, times=[0.0]),
                                 FitConfig(optimized_params=("sh_dc",)))
        assert grads["sh_dc"][0, 0] > 0
        assert abs(grads["sh_dc"][0, 1]) < 1e-12

    @pytest.mark.parametrize("seed", range(12))
    def test_matches_finite_differences(self, seed):
        field, targets, ctx = make_instance(seed)
        analytic = grad_photometric(
            field, targets, ctx, FitConfig(optimized_params=ALL_PARAMS))
        fd = fd_gradients(field, targets, ctx)
        for name in ALL_PARAMS:
            assert max_rel_error(analytic[name], fd[name]) < 1e-4, name

    def test_param_selection(self):
        field, targets, ctx = make_instance(1)
        grads = grad_photometric(field, targets, ctx,
                                 FitConfig(optimized_params=("mean", "opacity")))
        assert set(grads) == {"mean", "opacity"}

    def test_empty_field(self):
        field = GaussianField.empty()
        scene = static_scene(field)
        targets = rasterize.render_sequence(scene, FIT_RENDER, times=[0.0])
        grads = grad_photometric(field, targets,
                                 FitContext(scene, FIT_RENDER, times=[0.0]),
                                 FitConfig(optimized_params=ALL_PARAMS))
        assert grads["mean"].shape == (0, 3)


class TestLoss:
    def test_self_render_zero(self):
        rng = np.random.default_rng(3)
        field = random_field(rng, 4)
        scene = static_scene(field)
        targets = rasterize.render_sequence(scene, FIT_RENDER, times=[0.0])
        ctx = FitContext(scene, FIT_RENDER, times=[0.0])
        assert photometric_loss(field, targets, ctx) < 1e-10

    def test_uniform_color_shift(self):
        scene = static_scene(full_cover_field((0.4, 0.4, 0.4)))
        targets = rasterize.render_sequence(scene, FIT_RENDER, times=[0.0])
        shifted = static_scene(full_cover_field((0.5, 0.5, 0.5)))
        ctx = FitContext(shifted, FIT_RENDER, times=[0.0])
        loss = photometric_loss(shifted.background, targets, ctx)
        assert loss == pytest.approx(0.01, abs=1e-5)

    def test_empty_field_black_targets(self):
        config = RenderConfig(background_color=(0.0, 0.0, 0.0))
        scene = static_scene(GaussianField.empty())
        targets = rasterize.render_sequence(scene, config, times=[0.0])
        ctx = FitContext(scene, config, times=[0.0])
        assert photometric_loss(GaussianField.empty(), targets, ctx) == 0.0

    def test_shape_mismatch_rejected(self):
        field, targets, ctx = make_instance(0)
        bad_cam = CameraModel(fx=20.0, fy=20.0, cx=6.0, cy=6.0, width=12,
                              height=12, near=0.1, far=100.0)
        bad_scene = static_scene(field, cam=bad_cam)
        bad = rasterize.render_sequence(bad_scene, FIT_RENDER, times=[0.0])
        with pytest.raises(FitError):
            photometric_loss(field, bad, ctx)


class TestFitField:
    def test_zero_iterations_identity(self):
        field, targets, ctx = make_instance(2)
        out, losses = fit_field(field, targets, ctx, FitConfig(iterations=0))
        assert out is field
        assert len(losses) == 1

    def test_self_targets_leave_params_fixed(self):
        rng = np.random.default_rng(11)
        field = random_field(rng, 4)
        scene = static_scene(field)
        targets = rasterize.render_sequence(scene, FIT_RENDER, times=[0.0])
        ctx = FitContext(scene, FIT_RENDER, times=[0.0])
        out, _ = fit_field(field, targets, ctx,
                           FitConfig(iterations=5,
                                     optimized_params=ALL_PARAMS))
        assert np.allclose(out.means, field.means, atol=1e-9)
        assert np.allclose(out.sh, field.sh, atol=1e-9)
        assert np.allclose(out.opacities, field.opacities, atol=1e-9)
        assert np.allclose(out.scales, field.scales, atol=1e-9)
        assert np.allclose(out.rotations, field.rotations, atol=1e-9)

    def test_wrong_color_converges(self):
        true_field = full_cover_field((0.55, 0.35, 0.6))
        scene = static_scene(true_field)
        targets = rasterize.render_sequence(scene, FIT_RENDER, times=[0.0])
        init = full_cover_field((0.35, 0.55, 0.4))
        ctx = FitContext(scene, FIT_RENDER, times=[0.0])
        out, losses = fit_field(init, targets, ctx,
                                FitConfig(iterations=200, step_size=5.0,
                                          optimized_params=("sh_dc",)))
        assert losses[-1] < 0.01 * losses[0]
        got = np.clip(0.5 + SH_C0 * out.sh[0, 0], 0, 1)
        assert np.allclose(got, [0.55, 0.35, 0.6], atol=0.01)

    def test_loss_history_layout(self):
        field, targets, ctx = make_instance(4)
        _, losses = fit_field(field, targets, ctx,
                              FitConfig(iterations=3, step_size=0.1))
        assert len(losses) == 4
        first = photometric_loss(field, targets, ctx)
        assert losses[0] == pytest.approx(first, rel=1e-12)

    def test_nonfinite_loss_aborts(self):
        field, targets, ctx = make_instance(5)
        sh = field.sh.copy()
        sh[0, 0, 0] = np.nan
        bad = field.replace_params(sh=sh)
        with pytest.raises(FitError, match="iterate 0"):
            fit_field(bad, targets, ctx, FitConfig(iterations=2))

    def test_config_validation(self):
        with pytest.raises(FitError):
            FitConfig(iterations=-1)
        with pytest.raises(FitError):
            FitConfig(step_size=0.0)
        with pytest.raises(FitError):
            FitConfig(optimized_params=("mean", "colour"))


class TestLightingJitter:
    def test_zero_range_identity(self):
        rng = np.random.default_rng(0)
        field = random_field(rng, 3)
        assert lighting_jitter(field, 0.0, 5) is field

    def test_single_factor_on_dc_only(self):
        rng = np.random.default_rng(1)
        field = random_field(rng, 4)
        out = lighting_jitter(field, 0.3, seed=9)
        ratio = out.sh[:, 0, :] / field.sh[:, 0, :]
        assert np.allclose(ratio, ratio.flat[0])
        assert 0.7 <= ratio.flat[0] <= 1.3
        assert np.array_equal(out.sh[:, 1:, :], field.sh[:, 1:, :])
        assert np.array_equal(out.means, field.means)

    def test_seed_determinism(self):
        rng = np.random.default_rng(2)
        field = random_field(rng, 2)
        a = lighting_jitter(field, 0.2, seed=3)
        b = lighting_jitter(field, 0.2, seed=3)
        c = lighting_jitter(field, 0.2, seed=4)
        assert np.array_equal(a.sh, b.sh)
        assert not np.array_equal(a.sh, c.sh)

    def test_negative_range_rejected(self):
        with pytest.raises(FitError):
            lighting_jitter(GaussianField.empty(), -0.1, 0)

    def test_rendered_color_scales_pre_clamp(self):
        dc = _dc((0.62, 0.48, 0.3))
        coeffs = dc[None, :]
        out = lighting_jitter(
            GaussianField(np.zeros((1, 3)), np.ones((1, 3)),
                          np.array([[1.0, 0, 0, 0]]), np.ones(1),
                          coeffs[None, :, :], frame="world"), 0.25, seed=1)
        f = out.sh[0, 0, 0] / dc[0]
        view = np.array([0.0, 0.0, 1.0])
        got = rasterize.sh_eval(out.sh[0], view, 0)
        assert np.allclose(got, np.clip(0.5 + SH_C0 * f * dc, 0, 1))


class TestTrainingPair:
    def test_shape_mismatch_rejected(self, small_render):
        frames = small_render.frames
        import dataclasses as dc
        half = dataclasses.replace(small_render, frames=frames[:2],
                                   times=small_render.times[:2])
        with pytest.raises(FitError):
            TrainingPair(condition=half, target=small_render,
                         provenance="cycle", seed=0)
        del dc


class TestCyclePairs:
    def test_zero_perturbation_is_identity(self):
        rng = np.random.default_rng(21)
        field = random_field(rng, 1)
        scene = static_scene(field)
        pairs = build_cycle_pairs(scene, edit.PerturbationSpec(seed=0),
                                  FitConfig(iterations=30, step_size=1.0),
                                  FIT_RENDER)
        assert len(pairs) == 1
        pair = pairs[0]
        diff = np.mean([np.abs(c.rgb - t.rgb).mean()
                        for c, t in zip(pair.condition.frames,
                                        pair.target.frames)])
        assert diff < 1e-3
        assert pair.provenance == "cycle"
        assert pair.perturbed is not None

    def test_heading_perturbation_visible(self, small_scene):
        spec = edit.PerturbationSpec(heading_range=0.3, seed=5)
        pairs = build_cycle_pairs(small_scene, spec,
                                  FitConfig(iterations=2, step_size=0.5))
        pair = pairs[0]
        diff = np.mean([np.abs(c.rgb - t.rgb).mean()
                        for c, t in zip(pair.condition.frames,
                                        pair.target.frames)])
        assert diff > 1e-6
        # target is always the clean render of the original scene
        clean = rasterize.render_sequence(small_scene)
        for got, want in zip(pair.target.frames, clean.frames):
            assert np.array_equal(got.rgb, want.rgb)

    def test_seed_determinism(self, small_scene):
        spec = edit.PerturbationSpec(lateral_range=0.4, seed=8)
        fit = FitConfig(iterations=2, step_size=0.5)
        a = build_cycle_pairs(small_scene, spec, fit)
        b = build_cycle_pairs(small_scene, spec, fit)
        for fa, fb in zip(a[0].condition.frames, b[0].condition.frames):
            assert fa.rgb.tobytes() == fb.rgb.tobytes()
        for fa, fb in zip(a[0].perturbed.frames, b[0].perturbed.frames):
            assert fa.rgb.tobytes() == fb.rgb.tobytes()


def quadrant_scene():
    """Four 1-splat assets, each owning one image quadrant; splats render
    white, meshes red, so the green channel tells which representation won."""
    cam = CameraModel(fx=4.0, fy=4.0, cx=4.0, cy=4.0, width=8, height=8,
                      near=0.1, far=50.0)
    assets, trajs = [], {}
    sh = np.zeros((1, 1, 3))
    sh[0, 0] = _dc((1.0, 1.0, 1.0))
    for i, (dx, dy) in enumerate([(-2.5, -2.5), (2.5, -2.5),
                                  (-2.5, 2.5), (2.5, 2.5)]):
        splats = GaussianField(np.zeros((1, 3)), np.full((1, 3), 1.2),
                               np.array([[1.0, 0, 0, 0]]), np.array([0.99]),
                               sh.copy(), frame="asset_local")
        verts = np.array([[-1.2, -1.2, 0.0], [1.2, -1.2, 0.0], [0.0, 1.6, 0.0]])
        mesh = TriangleMesh(verts, np.array([[0, 1, 2]], dtype=np.int32),
                            np.tile([1.0, 0.0, 0.0], (3, 1)))
        asset = RigidAsset(id=f"blob{i}", klass="other",
                           box=BoundingBox3D(np.array([4.0, 4.0, 4.0])),
                           splats=splats, mesh=mesh)
        pose = Pose(np.array([1.0, 0, 0, 0]), np.array([dx, dy, 10.0]))
        assets.append(asset)
        trajs[asset.id] = Trajectory(np.array([0.0, 1.0]), (pose, pose))
    scene = static_scene(GaussianField.empty(), cam=cam, assets=assets,
                         extra_trajs=trajs)
    return scene.replace(timeline=np.array([0.0]))


def count_meshed(frame, scene):
    n = 0
    cam = scene.camera
    for asset in scene.assets:
        pose = scene.trajectories[asset.id].poses[0]
        u = int(cam.fx * pose.translation[0] / pose.translation[2] + cam.cx)
        v = int(cam.fy * pose.translation[1] / pose.translation[2] + cam.cy)
        if frame.rgb[v, u, 1] < 0.5:
            n += 1
    return n


class TestMeshPairs:
    def test_p_zero_no_jitter_exact(self, small_scene):
        pairs = build_mesh_pairs(small_scene, p=0.0, lighting=0.0, seed=0)
        assert len(pairs) == 2
        for pair in pairs:
            assert pair.provenance == "mesh_substitution"
            for c, t in zip(pair.condition.frames, pair.target.frames):
                assert np.array_equal(c.rgb, t.rgb)

    def test_p_one_substitutes_everything(self):
        scene = quadrant_scene()
        pairs = build_mesh_pairs(scene, p=1.0, lighting=0.0, seed=3)
        assert count_meshed(pairs[0].condition.frames[0], scene) == 4
        assert count_meshed(pairs[1].condition.frames[0], scene) == 0
        subbed = rasterize.render_sequence(
            scene, RenderConfig(),
            use_mesh_for=frozenset(a.id for a in scene.assets))
        assert np.array_equal(pairs[0].condition.frames[0].rgb,
                              subbed.frames[0].rgb)

    def test_substitution_count_statistics(self):
        scene = quadrant_scene()
        counts = [count_meshed(
            build_mesh_pairs(scene, p=0.5, lighting=0.0,
                             seed=s)[0].condition.frames[0], scene)
            for s in range(1000)]
        mean = np.mean(counts)
        # binomial(4, 0.5): mean 2, var 1 -> 3 sigma of the sample mean
        assert abs(mean - 2.0) < 3.0 / np.sqrt(1000)

    def test_lighting_jitter_changes_condition_only(self, small_scene):
        pairs = build_mesh_pairs(small_scene, p=0.0, lighting=0.4, seed=2)
        clean = rasterize.render_sequence(small_scene)
        for pair in pairs:
            for got, want in zip(pair.target.frames, clean.frames):
                assert np.array_equal(got.rgb, want.rgb)
        diff = np.abs(pairs[0].condition.frames[0].rgb
                      - pairs[0].target.frames[0].rgb).mean()
        assert diff > 1e-6

    def test_no_substitutable_assets(self):
        rng = np.random.default_rng(1)
        scene = static_scene(random_field(rng, 2))
        with pytest.raises(FitError, match="substitutable"):
            build_mesh_pairs(scene, p=0.5, lighting=0.0, seed=0)
        # p = 0 never needs substitution targets
        pairs = build_mesh_pairs(scene, p=0.0, lighting=0.0, seed=0)
        assert len(pairs) == 2

    def test_bad_probability(self, small_scene):
        with pytest.raises(FitError):
            build_mesh_pairs(small_scene, p=1.5, lighting=0.0, seed=0)

    def test_seed_determinism(self):
        scene = quadrant_scene()
        a = build_mesh_pairs(scene, p=0.5, lighting=0.2, seed=7)
        b = build_mesh_pairs(scene, p=0.5, lighting=0.2, seed=7)
        for pa, pb in zip(a, b):
            for fa, fb in zip(pa.condition.frames, pb.condition.frames):
                assert fa.rgb.tobytes() == fb.rgb.tobytes()


class TestPairPersistence:
    def test_round_trip(self, tmp_path, small_scene):
        spec = edit.PerturbationSpec(lateral_range=0.3, seed=1)
        pairs = build_cycle_pairs(small_scene, spec,
                                  FitConfig(iterations=1, step_size=0.5))
        pairs += build_mesh_pairs(small_scene, p=0.0, lighting=0.0, seed=4)
        save_pairs(pairs, str(tmp_path / "pairs"))
        loaded = load_pairs(str(tmp_path / "pairs"))
        assert len(loaded) == len(pairs)
        for orig, back in zip(pairs, loaded):
            assert back.provenance == orig.provenance
            assert back.seed == orig.seed
            assert (back.perturbed is None) == (orig.perturbed is None)
            for a, b in zip(orig.condition.frames, back.condition.frames):
                assert np.allclose(a.rgb, b.rgb, atol=1e-6)
                assert a.id_table == b.id_table

    def test_save_load_save_idempotent(self, tmp_path, small_scene):
        pairs = build_mesh_pairs(small_scene, p=0.0, lighting=0.0, seed=0)
        save_pairs(pairs, str(tmp_path / "a"))
        first = load_pairs(str(tmp_path / "a"))
        save_pairs(first, str(tmp_path / "b"))
        second = load_pairs(str(tmp_path / "b"))
        for p1, p2 in zip(first, second):
            for a, b in zip(p1.condition.frames, p2.condition.frames):
                assert np.array_equal(a.rgb, b.rgb)

    def test_unknown_format_rejected(self, tmp_path):
        d = tmp_path / "bad"
        d.mkdir()
        (d / "pairs.json").write_text('{"format": "nope/9", "count": 0}')
        with pytest.raises(FitError, match="format"):
            load_pairs(str(d))
