import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pets_lab.boxes import BoxRect, iou
from pets_lab.synthdata import (
    FOG_PRESETS,
    AugConfig,
    DomainConfig,
    Scene,
    StrongAug,
    WeakAug,
    apply_fog,
    clean_features,
    generate_scene,
    make_prototypes,
    make_scenes,
    read_manifest,
    render_features,
    render_scenes,
    strong_aug,
    weak_aug,
    write_manifest,
)

G, C, K = 12, 8, 3
PROTOS = make_prototypes(K, C, 7)


class TestPrototypes:
    def test_orthonormal(self):
        assert np.allclose(PROTOS @ PROTOS.T, np.eye(K + 1), atol=1e-12)

    def test_norm_and_seed(self):
        assert np.allclose(np.linalg.norm(make_prototypes(K, C, 1, 2.0), axis=1), 2.0)
        assert np.array_equal(make_prototypes(K, C, 3), make_prototypes(K, C, 3))


class TestScenes:
    def test_single_object(self):
        for seed in range(20):
            assert len(generate_scene(np.random.default_rng(seed), K, 1, G).objects) == 1

    def test_deterministic(self):
        a = make_scenes(5, 10, K, 4, G, contrast_range=(0.5, 1.5))
        b = make_scenes(5, 10, K, 4, G, contrast_range=(0.5, 1.5))
        assert a == b

    def test_prefix_stable(self):
        assert make_scenes(5, 10, K, 4, G)[:4] == make_scenes(5, 4, K, 4, G)

    def test_class_frequencies_uniform(self):
        scenes = make_scenes(11, 1000, K, 1, G)
        counts = np.bincount([c for s in scenes for _, c in s.objects], minlength=K)
        n, p = counts.sum(), 1.0 / K
        assert np.all(np.abs(counts - n * p) <= 3.0 * np.sqrt(n * p * (1 - p)))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 5))
    def test_invariants(self, seed, max_objects):
        s = generate_scene(np.random.default_rng(seed), K, max_objects, G, contrast_range=(0.5, 1.5))
        assert 1 <= len(s.objects) <= max_objects
        for k, (b, c) in enumerate(s.objects):
            assert 0 <= c < K
            assert min(b.x2 - b.x1, b.y2 - b.y1) >= 2.0 / G - 1e-12
            assert 0.5 <= s.object_contrast(k) <= 1.5
        for i, (a, _) in enumerate(s.objects):
            for b, _ in s.objects[i + 1 :]:
                assert iou(a, b) < 0.3

    def test_rejects_bad_args(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError):
            generate_scene(rng, 0, 2, G)
        with pytest.raises(ValueError):
            generate_scene(rng, K, 0, G)
        with pytest.raises(ValueError):
            Scene(((BoxRect(0, 0, 0.5, 0.5), 0),), 0, (1.0, 2.0))

    def test_manifest_round_trip(self, tmp_path):
        scenes = make_scenes(3, 5, K, 4, G, contrast_range=(0.5, 1.5))
        write_manifest(scenes, tmp_path / "m.jsonl")
        assert read_manifest(tmp_path / "m.jsonl") == scenes


class TestRendering:
    def test_empty_scene_zero(self):
        assert np.all(render_features(Scene(()), DomainConfig(), None, PROTOS, G) == 0.0)

    def test_full_fog_constant(self):
        scene = make_scenes(1, 1, K, 4, G)[0]
        out = render_features(scene, DomainConfig(fog_level=1.0, haze_bias=0.3), None, PROTOS, G)
        assert np.all(out == 0.3)

    def test_half_fog_halves(self):
        clean = clean_features(make_scenes(2, 1, K, 4, G)[0], PROTOS, G)
        assert np.array_equal(apply_fog(clean, DomainConfig(fog_level=0.5), None), 0.5 * clean)

    def test_source_noiseless_reproducible(self):
        scenes = make_scenes(4, 3, K, 4, G)
        assert np.array_equal(render_scenes(scenes, DomainConfig(), 0, PROTOS, G), render_scenes(scenes, DomainConfig(), 9, PROTOS, G))

    def test_noise_seeded(self):
        scenes = make_scenes(4, 3, K, 4, G)
        dom = DomainConfig.preset("fog_0.6")
        a = render_scenes(scenes, dom, 1, PROTOS, G)
        assert np.array_equal(a, render_scenes(scenes, dom, 1, PROTOS, G))
        assert not np.array_equal(a, render_scenes(scenes, dom, 2, PROTOS, G))

    def test_noise_requires_rng(self):
        with pytest.raises(ValueError):
            apply_fog(np.zeros((2, 2, 1)), DomainConfig(noise_sigma=0.1), None)

    def test_peak_at_center_cell(self):
        box = BoxRect(4.0 / G, 4.0 / G, 7.0 / G, 7.0 / G)  # center at cell (5, 5)
        fmap = clean_features(Scene(((box, 1),)), PROTOS, G)
        strength = fmap @ PROTOS[1]
        assert np.unravel_index(np.argmax(strength), strength.shape) == (5, 5)
        assert strength[5, 5] == pytest.approx(1.0)
        assert fmap[5, 5] @ PROTOS[-1] == pytest.approx(1.0)
        assert fmap[5, 6] @ PROTOS[-1] == pytest.approx(0.0, abs=1e-12)

    def test_presets(self):
        assert set(FOG_PRESETS) == {"source", "fog_0.3", "fog_0.45", "fog_0.6"}
        levels = [DomainConfig.preset(n).fog_level for n in ("fog_0.3", "fog_0.45", "fog_0.6")]
        assert levels == [0.3, 0.45, 0.6]
        with pytest.raises(ValueError):
            DomainConfig.preset("fog_0.9")

    def test_domain_validation(self):
        with pytest.raises(ValueError):
            DomainConfig(fog_level=1.5)


class TestAugmentation:
    def test_weak_identity(self):
        fmap = np.random.default_rng(0).normal(size=(G, G, C))
        scene = make_scenes(0, 1, K, 4, G)[0]
        out, s2 = weak_aug(fmap, scene, np.random.default_rng(1), WeakAug(flip_prob=0.0, jitter_sigma=0.0))
        assert np.array_equal(out, fmap) and s2 == scene

    def test_forced_flip_box(self):
        scene = Scene(((BoxRect(0.1, 0.2, 0.3, 0.4), 0),))
        _, s2 = weak_aug(np.zeros((G, G, C)), scene, np.random.default_rng(0), WeakAug(1.0, 0.0))
        assert s2.objects[0][0].as_tuple() == pytest.approx((0.7, 0.2, 0.9, 0.4))

    def test_flip_involution(self):
        fmap = np.random.default_rng(0).normal(size=(G, G, C))
        scene = make_scenes(0, 1, K, 4, G)[0]
        cfg = WeakAug(1.0, 0.0)
        once = weak_aug(fmap, scene, np.random.default_rng(1), cfg)
        twice = weak_aug(*once, np.random.default_rng(2), cfg)
        assert np.array_equal(twice[0], fmap)
        for (a, ca), (b, cb) in zip(twice[1].objects, scene.objects):
            assert ca == cb and a.as_tuple() == pytest.approx(b.as_tuple(), abs=1e-12)

    def test_flip_keeps_features_and_boxes_consistent(self):
        scene = make_scenes(8, 1, K, 4, G)[0]
        fmap = clean_features(scene, PROTOS, G)
        out, flipped = weak_aug(fmap, scene, np.random.default_rng(0), WeakAug(1.0, 0.0))
        assert np.allclose(out, clean_features(flipped, PROTOS, G), atol=1e-12)
        assert sorted(c for _, c in flipped.objects) == sorted(c for _, c in scene.objects)

    def test_strong_identity(self):
        fmap = np.random.default_rng(0).normal(size=(G, G, C))
        cfg = StrongAug(erase_prob=0.0, noise_sigma=0.0, channel_scale_range=(1.0, 1.0))
        assert np.array_equal(strong_aug(fmap, np.random.default_rng(1), cfg), fmap)

    def test_strong_full_erase(self):
        fmap = np.random.default_rng(0).normal(size=(G, G, C))
        cfg = StrongAug(erase_prob=1.0, erase_max_frac=1.0, erase_min_frac=1.0, erase_ratio=(1.0, 1.0), noise_sigma=0.0, channel_scale_range=(1.0, 1.0))
        assert np.all(strong_aug(fmap, np.random.default_rng(1), cfg) == 0.0)

    def test_strong_deterministic_and_pure(self):
        fmap = np.random.default_rng(0).normal(size=(G, G, C))
        before = fmap.copy()
        a = strong_aug(fmap, np.random.default_rng(5), StrongAug())
        b = strong_aug(fmap, np.random.default_rng(5), StrongAug())
        assert np.array_equal(a, b) and np.array_equal(fmap, before)

    def test_erase_area_bounded(self):
        fmap = np.ones((G, G, C))
        cfg = StrongAug(erase_prob=1.0, noise_sigma=0.0, channel_scale_range=(1.0, 1.0))
        for seed in range(50):
            zeros = np.all(strong_aug(fmap, np.random.default_rng(seed), cfg) == 0.0, axis=-1).sum()
            assert 1 <= zeros <= int(0.15 * G * G)

    def test_config_round_trip(self):
        cfg = AugConfig(WeakAug(0.3, 0.01), StrongAug(erase_ratio=(0.4, 2.5)))
        assert AugConfig.from_dict(cfg.to_dict()) == cfg
        with pytest.raises(ValueError):
            AugConfig(WeakAug(flip_prob=2.0))
