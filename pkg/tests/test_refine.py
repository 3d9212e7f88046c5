import math

import numpy as np
import pytest

from contourpose.assets import cube, lbracket
from contourpose.bench import perturb_pose, run_trial
from contourpose.errors import DegenerateSceneError, InvalidArgumentError
from contourpose.geometry import Pose, apply_update, mesh_diameter, quat_angle_between
from contourpose.raster import SilhouetteMask, compute_window_size, extract_contour_pixels
from contourpose.refine import (
    RefinementConfig,
    Termination,
    build_scene_observation,
    is_converged,
    is_diverged,
    refine_iterative,
    refine_step,
    touches_mask,
)

from .conftest import front_pose

CFG = RefinementConfig()


def rotation_deg(a: Pose, b: Pose) -> float:
    return math.degrees(quat_angle_between(a.rotation, b.rotation))


class TestThresholds:
    @pytest.mark.parametrize(
        "rot, trans, expected",
        [(1.49, 0.0074, True), (1.5, 0.0, False), (0.0, 0.0075, False), (2.0, 0.001, False), (0.0, 0.0, True)],
    )
    def test_converged(self, rot, trans, expected):
        assert is_converged(rot, trans, CFG) is expected

    @pytest.mark.parametrize(
        "rot, trans, expected",
        [(45.0, 0.05, False), (45.01, 0.0, True), (0.0, 0.0501, True), (10.0, 0.01, False)],
    )
    def test_diverged(self, rot, trans, expected):
        assert is_diverged(rot, trans, 0.1, CFG) is expected

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"max_outer_iterations": 0},
            {"stop_rotation": -1.0},
            {"n_contour_points": 0},
            {"optimizer": "newton"},
            {"stop_rotation": 50.0},
            {"window_padding_fraction": -0.1},
            {"step_growth": 0.5},
        ],
    )
    def test_invalid_config(self, kwargs):
        with pytest.raises(InvalidArgumentError):
            RefinementConfig(**kwargs)


class TestSceneObservation:
    def test_unoccluded(self, K):
        gt = front_pose()
        field, points, mask = build_scene_observation(cube(), gt, K)
        assert field.values.shape == (K.height, K.width)
        assert len(points) == 100
        assert mask.area > 0
        assert field.values.min() == 0.0

    def test_windowed_field(self, K):
        obs = build_scene_observation(cube(), front_pose(), K, window=151)
        assert obs.field.values.shape == (151, 151)
        assert obs.mask.values.shape == (151, 151)
        assert obs.occlusion is None

    def test_occluder_behind_is_ignored(self, K):
        gt = front_pose()
        plain = build_scene_observation(cube(), gt, K)
        wall = (cube(1.0), Pose(translation=[0, 0, 2.0]))
        behind = build_scene_observation(cube(), gt, K, occluder=wall)
        assert np.array_equal(plain.mask.values, behind.mask.values)
        assert np.array_equal(plain.field.values, behind.field.values)

    def test_partial_occluder_shrinks_contour(self, K):
        from contourpose.bench import slab_occluder

        gt = front_pose()
        mesh = cube()
        full = extract_contour_pixels(build_scene_observation(mesh, gt, K).mask)
        occ = slab_occluder(mesh, gt, K, 0.3)
        obs = build_scene_observation(mesh, gt, K, occluder=occ, mask_occlusions=True)
        kept = int(np.count_nonzero(obs.field.values == 0))
        assert kept < 0.85 * len(full)
        assert not touches_mask(obs.points.pixels, obs.occlusion).any()

    def test_fully_occluded(self, K):
        slab = cube(1.0)
        slab = type(slab)(slab.vertices * [1.0, 1.0, 0.01], slab.triangles)
        wall = (slab, Pose(translation=[0, 0, 0.2]))
        with pytest.raises(DegenerateSceneError):
            build_scene_observation(cube(), front_pose(), K, occluder=wall)

    def test_touches_mask(self):
        m = np.zeros((5, 5), bool)
        m[2, 2] = True
        mask = SilhouetteMask(m, origin=(10, 20))
        pix = np.array([[12, 22], [13, 22], [12, 21], [13, 23], [0, 0], [14, 22]])
        np.testing.assert_array_equal(touches_mask(pix, mask), [True, True, True, False, False, False])


class TestRefineStep:
    def test_fixed_point_at_ground_truth(self, K):
        mesh = lbracket()
        gt = front_pose()
        obs = build_scene_observation(mesh, gt, K)
        update, trace = refine_step(gt, obs.field, obs.points, mesh, K)
        out = apply_update(gt, update.to_pose())
        assert rotation_deg(out, gt) < 0.5
        assert np.linalg.norm(out.translation - gt.translation) < 0.005 * mesh_diameter(mesh)
        assert all(b <= a for a, b in zip(trace, trace[1:]))

    def test_one_step_halves_loss_for_lateral_shift(self, K):
        mesh = cube()
        d = mesh_diameter(mesh)
        gt = front_pose()
        obs = build_scene_observation(mesh, gt, K)
        start = Pose(gt.rotation, gt.translation + [0.1 * d, 0, 0])
        _, trace = refine_step(start, obs.field, obs.points, mesh, K)
        assert trace[-1] <= 0.5 * trace[0]
        assert all(b <= a for a, b in zip(trace, trace[1:]))

    def test_loss_grows_with_shift(self, K):
        # the energy the step descends is monotone along the shift direction
        from contourpose.loss import UpdateParams, visual_loss

        mesh = cube()
        gt = front_pose()
        obs = build_scene_observation(mesh, gt, K)
        values = [
            visual_loss(UpdateParams(t=[s, 0, 0]), obs.field, obs.points, K).value
            for s in np.linspace(0, 0.02, 9)
        ]
        assert all(b > a for a, b in zip(values, values[1:]))

    def test_unidirectional_without_scene_points(self, K):
        mesh = cube()
        gt = front_pose()
        obs = build_scene_observation(mesh, gt, K)
        start = Pose(gt.rotation, gt.translation + [0.005, 0, 0])
        _, trace = refine_step(start, obs.field, None, mesh, K)
        assert trace[-1] < trace[0]


class TestRefineIterative:
    def test_converges_immediately_from_ground_truth(self, K):
        mesh = cube()
        gt = front_pose()
        obs = build_scene_observation(mesh, gt, K)
        res = refine_iterative(gt, obs.field, obs.points, mesh, K, gt_pose=gt)
        assert res.termination is Termination.CONVERGED
        assert res.iterations == 1

    def test_updates_compose_to_final_pose(self, K):
        mesh = lbracket()
        d = mesh_diameter(mesh)
        gt = front_pose()
        init = perturb_pose(gt, 8.0, 0.05, d, seed=2)
        obs = build_scene_observation(mesh, gt, K)
        res = refine_iterative(init, obs.field, obs.points, mesh, K, gt_pose=gt)
        pose = init
        for u in res.updates:
            pose = apply_update(pose, u)
        assert quat_angle_between(pose.rotation, res.final_pose.rotation) < 1e-9
        np.testing.assert_allclose(pose.translation, res.final_pose.translation, atol=1e-9)
        assert len(res.trace) == res.iterations
        assert res.final_rotation_error_deg < rotation_deg(init, gt)

    def test_deterministic(self, K):
        mesh = cube()
        gt = front_pose()
        init = perturb_pose(gt, 10.0, 0.1, mesh_diameter(mesh), seed=5)
        obs = build_scene_observation(mesh, gt, K)
        a = refine_iterative(init, obs.field, obs.points, mesh, K)
        b = refine_iterative(init, obs.field, obs.points, mesh, K)
        assert a.final_pose == b.final_pose
        assert [t.loss for t in a.trace] == [t.loss for t in b.trace]

    def test_error_termination(self, K):
        mesh = cube()
        gt = front_pose()
        obs = build_scene_observation(mesh, gt, K)
        behind = Pose(gt.rotation, [0, 0, -0.5])
        res = refine_iterative(behind, obs.field, obs.points, mesh, K)
        assert res.termination is Termination.ERROR
        assert res.error
        assert res.final_pose == behind

    def test_divergence_reported(self, K):
        mesh = cube()
        gt = front_pose()
        obs = build_scene_observation(mesh, gt, K)
        far = Pose(gt.rotation, gt.translation + [0.06, 0, 0])
        cfg = RefinementConfig(max_outer_iterations=1, inner_steps_per_render=1, divergence_translation_fraction=0.1)
        res = refine_iterative(far, obs.field, obs.points, mesh, K, cfg, gt_pose=gt)
        assert res.termination is Termination.DIVERGED


@pytest.mark.slow
@pytest.mark.xfail(
    strict=True,
    reason="cube, 15 deg + 0.1 d: about three quarters of trials recover; silhouette edge "
    "switches create local minima (see the decisions ledger)",
)
def test_cube_fifteen_degrees_recovery(K):
    mesh = cube()
    d = mesh_diameter(mesh)
    md = 3 * d
    window = compute_window_size(mesh, K, md)
    good = 0
    for seed in range(100):
        r = run_trial(
            mesh, K, CFG, object_name="cube", mode="both", level=15.0, fraction=0.1,
            seed=seed, min_distance=md, window=window, diameter=d,
        )  # fmt: skip
        good += r.final_rot_deg < 5 and r.final_trans_m < 0.05 * d
    print(f"cube 15 deg + 0.1 d: {good}/100 recovered")
    assert good >= 90
