import numpy as np
import pytest

from marstag.augment import (
    FLIP_H,
    FLIP_V,
    ROT90,
    ROT180,
    ROT270,
    AugmentationSpec,
    augment,
    brightness,
    hirise_recipe,
    mer_recipe,
    msl_recipe,
    parse_transform,
    preprocess_resize,
    skew,
)
from marstag.datasets import Campaign, Instrument
from marstag.errors import MarstagError


def checker(rows=12, cols=12):
    rng = np.random.default_rng(0)
    return rng.uniform(0, 255, size=(rows, cols))


class TestAugmentCounts:
    def test_exact_output_count(self):
        spec = AugmentationSpec((ROT90, FLIP_H), per_source_count=5)
        assert len(augment(checker(), spec, seed=0)) == 5

    def test_mer_recipe_emits_29(self):
        outs = augment(checker(16, 16), mer_recipe(), seed=3)
        assert len(outs) == 29
        assert all(o.shape == (16, 16) for o in outs)

    def test_deterministic_given_seed(self):
        spec = AugmentationSpec((skew(8.0), brightness()), per_source_count=4)
        a = augment(checker(), spec, seed=11)
        b = augment(checker(), spec, seed=11)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))
        c = augment(checker(), spec, seed=12)
        assert not all(np.array_equal(x, y) for x, y in zip(a, c))


class TestExactPermutations:
    def test_rot180_is_involution(self):
        img = checker()
        spec = AugmentationSpec((ROT180,), per_source_count=1)
        once = augment(img, spec, seed=0)[0]
        twice = augment(once, spec, seed=0)[0]
        assert np.array_equal(twice, img)

    def test_flip_h_hand_case(self):
        img = np.array([[1.0, 2.0], [3.0, 4.0]])
        out = augment(img, AugmentationSpec((FLIP_H,), 1), seed=0)[0]
        assert np.array_equal(out, np.array([[2.0, 1.0], [4.0, 3.0]]))

    def test_flip_v_is_involution(self):
        img = checker()
        spec = AugmentationSpec((FLIP_V,), 1)
        assert np.array_equal(augment(augment(img, spec, 0)[0], spec, 0)[0], img)

    def test_rot90_rot270_identity(self):
        img = checker()
        r90 = augment(img, AugmentationSpec((ROT90,), 1), 0)[0]
        back = augment(r90, AugmentationSpec((ROT270,), 1), 0)[0]
        assert np.array_equal(back, img)

    def test_rotations_are_permutations(self):
        img = checker()
        out = augment(img, AugmentationSpec((ROT90,), 1), 0)[0]
        assert sorted(out.ravel()) == sorted(img.ravel())


class TestBrightness:
    def test_multiplicative_within_range_and_clamped(self):
        img = np.full((8, 8), 200.0)
        outs = augment(img, AugmentationSpec((brightness(0.8, 1.2),), 10), seed=5)
        for out in outs:
            assert out.min() >= 0.0 and out.max() <= 255.0
            factor = out[0, 0] / 200.0
            assert 0.8 <= factor <= 1.2 or out[0, 0] == 255.0


class TestCropSafety:
    def test_large_shear_rejected(self):
        spec = AugmentationSpec((skew(45.0),), 1, square_crop_after_warp=True)
        with pytest.raises(MarstagError) as err:
            augment(checker(24, 24), spec, seed=0)
        assert err.value.code == "INVALID_SPEC"

    def test_default_limits_pass(self):
        spec = AugmentationSpec((skew(8.0),), 1, square_crop_after_warp=True)
        out = augment(checker(24, 24), spec, seed=0)[0]
        assert out.shape == (24, 24)

    def test_square_crop_output_square(self):
        spec = AugmentationSpec((ROT90,), 1, square_crop_after_warp=True)
        out = augment(checker(10, 16), spec, seed=0)[0]
        assert out.shape == (10, 10)


class TestRecipes:
    def test_hirise_upsample_factor(self):
        spec = hirise_recipe()
        assert spec.upsample_factor[Campaign.SECOND_CAMPAIGN] == 2
        kinds = [t.kind for t in spec.transforms]
        assert kinds[:5] == ["ROT90", "ROT180", "ROT270", "FLIP_H", "FLIP_V"]
        assert "BRIGHTNESS" in kinds

    def test_msl_per_instrument(self):
        mahli = msl_recipe(Instrument.MAHLI)
        assert {t.kind for t in mahli.transforms} == {
            "ROT90", "ROT180", "ROT270", "FLIP_H", "FLIP_V",
        }
        mast = msl_recipe(Instrument.MASTCAM_LEFT)
        assert {t.kind for t in mast.transforms} == {"FLIP_H", "FLIP_V"}

    def test_mer_recipe_composition(self):
        spec = mer_recipe()
        assert spec.per_source_count == 29
        assert len(spec.transforms) == 29
        assert spec.square_crop_after_warp
        kinds = [t.kind for t in spec.transforms]
        assert kinds.count("SKEW") == 13 and kinds.count("SHEAR") == 13

    def test_parse_transform_round_trip(self):
        for token in ("ROT90", "FLIP_V", "BRIGHTNESS(0.7,1.3)", "SKEW(6)", "SHEAR(4.5)"):
            t = parse_transform(token)
            assert parse_transform(str(t)) == t


class TestPreprocess:
    def test_identity_when_conformant(self):
        img = np.arange(227 * 227, dtype=float).reshape(227, 227)
        out = preprocess_resize(img, "msl_center_crop", 227)
        assert out.shape == (227, 227)
        assert np.array_equal(out, img)

    def test_scale_then_center_crop(self):
        img = np.tile(np.arange(908, dtype=float), (454, 1))
        out = preprocess_resize(img, "msl_center_crop", 227)
        assert out.shape == (227, 227)

    def test_landmark_mode_direct_resize(self):
        out = preprocess_resize(np.ones((100, 100)), "hirise_square", 227)
        assert out.shape == (227, 227)
        assert np.allclose(out, 1.0)
