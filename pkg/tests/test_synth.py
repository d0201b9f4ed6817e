"""Scene generator determinism, truth arithmetic, and metric counting."""

import numpy as np
import pytest

from terracloth.core import Label
from terracloth.errors import InvalidSpec, LengthMismatch
from terracloth.synth import (
    CROWN_VERTICAL_RATIO,
    Flat,
    GaussianHills,
    Ramp,
    Ravine,
    SceneSpec,
    crown_point_budget,
    evaluate,
    generate_scene,
)


class TestGenerateScene:
    def test_flat_density_one_exact_count(self):
        scene = generate_scene(SceneSpec())
        assert len(scene.cloud) == 10_000
        assert np.all(scene.truth == int(Label.GROUND))
        z = scene.cloud.xyz[:, 2]
        assert abs(z.mean()) < 0.002
        assert abs(z.std() - 0.02) < 0.002

    def test_same_seed_bit_identical(self):
        spec = SceneSpec(
            extent=(30.0, 30.0),
            ground=Ramp(0.2),
            density=4.0,
            tree_count=6,
            outlier_count=50,
            seed=11,
        )
        a = generate_scene(spec)
        b = generate_scene(spec)
        assert np.array_equal(a.cloud.xyz, b.cloud.xyz)
        assert np.array_equal(a.truth, b.truth)

    def test_different_seed_differs(self):
        a = generate_scene(SceneSpec(extent=(10.0, 10.0), seed=1))
        b = generate_scene(SceneSpec(extent=(10.0, 10.0), seed=2))
        assert not np.array_equal(a.cloud.xyz, b.cloud.xyz)

    def test_class_counts_follow_spec_arithmetic(self):
        spec = SceneSpec(
            extent=(20.0, 30.0),
            density=2.5,
            tree_count=7,
            trunk_height=(5.0, 5.0),
            crown_radius=(2.0, 2.0),
            crown_density=10.0,
            outlier_count=123,
            seed=3,
        )
        scene = generate_scene(spec)
        assert scene.count(Label.GROUND) == round(2.5 * 20 * 30)
        assert scene.count(Label.NON_GROUND) == 7 * crown_point_budget(2.0, 10.0)
        assert scene.count(Label.OUTLIER) == 123
        assert scene.count(Label.GROUND) + scene.count(Label.NON_GROUND) + scene.count(
            Label.OUTLIER
        ) == len(scene.cloud)

    def test_ravine_relief(self):
        spec = SceneSpec(
            extent=(80.0, 80.0), ground=Ravine(depth=40.0, width=56.0), density=4.0, seed=4
        )
        scene = generate_scene(spec)
        z = scene.cloud.xyz[:, 2]
        assert abs((z.max() - z.min()) - 40.0) < 0.3

    def test_crowns_sit_above_their_ground(self):
        spec = SceneSpec(
            extent=(40.0, 40.0),
            ground=Ramp(0.3),
            density=1.0,
            tree_count=12,
            trunk_height=(3.0, 8.0),
            seed=5,
        )
        scene = generate_scene(spec)
        tree = scene.truth == int(Label.NON_GROUND)
        pts = scene.cloud.xyz[tree]
        local_ground = 0.3 * pts[:, 0]
        assert np.all(pts[:, 2] - local_ground > 2.5)
        assert pts[:, 0].min() > -0.5 and pts[:, 0].max() < 40.5

    def test_crown_points_form_a_shell(self):
        spec = SceneSpec(
            extent=(20.0, 20.0),
            density=0.0,
            tree_count=1,
            trunk_height=(4.0, 4.0),
            crown_radius=(2.0, 2.0),
            crown_density=30.0,
            seed=6,
        )
        scene = generate_scene(spec)
        pts = scene.cloud.xyz
        rv = CROWN_VERTICAL_RATIO * 2.0
        center = np.array([pts[:, 0].mean(), pts[:, 1].mean(), pts[:, 2].mean()])
        rel = (pts - center) / [2.0, 2.0, rv]
        rho = np.sqrt((rel**2).sum(axis=1))
        assert rho.min() > 0.85 and rho.max() < 1.15

    def test_outliers_fill_inflated_box(self):
        spec = SceneSpec(extent=(20.0, 20.0), density=2.0, outlier_count=400, seed=7)
        scene = generate_scene(spec)
        out = scene.cloud.xyz[scene.truth == int(Label.OUTLIER)]
        structure = scene.cloud.xyz[scene.truth != int(Label.OUTLIER)]
        lo = structure.min(axis=0) - 20.0
        hi = structure.max(axis=0) + 20.0
        assert np.all(out >= lo) and np.all(out <= hi)
        # with a 20 m margin most outliers must leave the structure box
        inside = np.all((out >= structure.min(axis=0)) & (out <= structure.max(axis=0)), axis=1)
        assert inside.mean() < 0.2

    def test_gaussian_hills_bounded_and_deterministic(self):
        spec = SceneSpec(
            extent=(60.0, 60.0),
            ground=GaussianHills(count=4, amplitude=6.0, radius=10.0),
            density=2.0,
            seed=8,
        )
        a = generate_scene(spec)
        b = generate_scene(spec)
        assert np.array_equal(a.cloud.xyz, b.cloud.xyz)
        z = a.cloud.xyz[:, 2]
        assert z.min() > -0.2
        assert z.max() < 4 * 6.0 + 0.2
        assert z.max() > 1.0  # the hills actually show up

    def test_invalid_specs(self):
        with pytest.raises(InvalidSpec):
            SceneSpec(extent=(0.0, 10.0))
        with pytest.raises(InvalidSpec):
            SceneSpec(density=-1.0)
        with pytest.raises(InvalidSpec):
            SceneSpec(tree_count=-1)
        with pytest.raises(InvalidSpec):
            SceneSpec(trunk_height=(5.0, 3.0))
        with pytest.raises(InvalidSpec):
            SceneSpec(crown_radius=(0.0, 1.0))
        with pytest.raises(InvalidSpec):
            SceneSpec(outlier_count=-5)
        with pytest.raises(InvalidSpec):
            SceneSpec(extent=(4.0, 4.0), tree_count=1, crown_radius=(2.5, 2.5))
        with pytest.raises(InvalidSpec):
            Ravine(depth=-1.0, width=10.0)
        with pytest.raises(InvalidSpec):
            Ravine(depth=1.0, width=0.0)
        with pytest.raises(InvalidSpec):
            GaussianHills(count=-1)


def small_scene(seed=9):
    return generate_scene(
        SceneSpec(extent=(10.0, 10.0), density=0.6, tree_count=2, outlier_count=15, seed=seed)
    )


class TestEvaluate:
    def test_perfect_prediction(self):
        scene = small_scene()
        m = evaluate(scene, scene.truth.copy())
        assert m.type1 == 0.0 and m.type2 == 0.0 and m.total == 0.0

    def test_everything_ground(self):
        scene = small_scene()
        pred = np.full(len(scene.cloud), int(Label.GROUND), dtype=np.uint8)
        m = evaluate(scene, pred)
        n_g = scene.count(Label.GROUND)
        n_ng = scene.count(Label.NON_GROUND)
        assert m.type1 == 0.0
        assert m.type2 == 1.0
        assert m.total == n_ng / (n_g + n_ng)

    def test_matches_hand_confusion_count(self):
        rng = np.random.default_rng(10)
        scene = small_scene()
        pred = rng.choice([1, 2, 7], size=len(scene.cloud)).astype(np.uint8)
        m = evaluate(scene, pred)
        miss_g = miss_ng = n_g = n_ng = 0
        for t, p in zip(scene.truth, pred):
            if t == 7:
                continue
            if t == 1:
                n_g += 1
                if p != 1:
                    miss_g += 1
            else:
                n_ng += 1
                if p == 1:
                    miss_ng += 1
        assert m.type1 == miss_g / n_g
        assert m.type2 == miss_ng / n_ng
        assert m.total == (miss_g + miss_ng) / (n_g + n_ng)
        assert m.total == pytest.approx(
            (m.type1 * n_g + m.type2 * n_ng) / (n_g + n_ng), abs=1e-12
        )

    def test_outliers_do_not_count(self):
        scene = small_scene()
        pred = scene.truth.copy()
        base = evaluate(scene, pred)
        pred[scene.truth == int(Label.OUTLIER)] = int(Label.GROUND)
        flipped = evaluate(scene, pred)
        assert flipped == base

    def test_permutation_symmetry(self):
        rng = np.random.default_rng(11)
        scene = small_scene()
        pred = rng.choice([1, 2], size=len(scene.cloud)).astype(np.uint8)
        base = evaluate(scene, pred)
        perm = rng.permutation(len(scene.cloud))
        from terracloth.synth import SceneTruth

        shuffled = SceneTruth(cloud=scene.cloud.select(perm), truth=scene.truth[perm])
        assert evaluate(shuffled, pred[perm]) == base

    def test_length_mismatch(self):
        scene = small_scene()
        with pytest.raises(LengthMismatch):
            evaluate(scene, np.array([1, 2], dtype=np.uint8))
