import math

import numpy as np
from django.test import SimpleTestCase

from wsi_pipeline.exceptions import EmptyClass, InvalidConfig, NonDistribution, RatioOutOfRange
from wsi_pipeline.labeling import (
    BENIGN, MALIGNANT, AugmentConfig, LabelingConfig, SmoothedLabel, apply_displacement, attach_targets,
    augment_patch, brightness_contrast, compute_a1_max, flip_patch, hard_label, label_patches,
    sample_training_patches, smooth_label, soft_target_cross_entropy,
)

from .helpers import make_patch, square_mask


class SmoothLabelTests(SimpleTestCase):
    def test_malignant_patch_with_half_area(self):
        label = smooth_label(MALIGNANT, 50, LabelingConfig(epsilon=0.1, a1_max=100))
        self.assertAlmostEqual(label.p_malignant, 0.95, delta=1e-9)
        self.assertAlmostEqual(label.p_benign, 0.05, delta=1e-9)

    def test_benign_patch_without_area_is_one_hot(self):
        label = smooth_label(BENIGN, 0, LabelingConfig(epsilon=0.1, a1_max=100))
        self.assertAlmostEqual(label.p_benign, 1.0, delta=1e-12)
        self.assertEqual(label.p_malignant, 0.0)

    def test_full_area_malignant_is_one_hot(self):
        label = smooth_label(MALIGNANT, 100, LabelingConfig(epsilon=0.1, a1_max=100))
        self.assertAlmostEqual(label.p_malignant, 1.0, delta=1e-12)

    def test_epsilon_changes_targets_for_partial_areas(self):
        plain = smooth_label(MALIGNANT, 30, LabelingConfig(epsilon=0.0, a1_max=100))
        smoothed = smooth_label(MALIGNANT, 30, LabelingConfig(epsilon=0.1, a1_max=100))
        self.assertNotEqual(plain.as_tuple(), smoothed.as_tuple())

    def test_distribution_laws_on_random_inputs(self):
        rng = np.random.default_rng(0)
        for _ in range(10000):
            y = int(rng.integers(0, 2))
            a1_max = int(rng.integers(1, 1000))
            a1 = int(rng.integers(0, a1_max + 1))
            eps = float(rng.choice([0.0, rng.uniform(0, 0.99)]))
            label = smooth_label(y, a1, LabelingConfig(epsilon=eps, a1_max=a1_max))
            self.assertAlmostEqual(label.p_benign + label.p_malignant, 1.0, delta=1e-9)
            if eps == 0.0 or a1 in (0, a1_max) and (a1 == 0) == (y == BENIGN):
                self.assertAlmostEqual(label.p_malignant, float(y == MALIGNANT), delta=1e-9)

    def test_area_above_maximum(self):
        with self.assertRaises(RatioOutOfRange):
            smooth_label(MALIGNANT, 101, LabelingConfig(a1_max=100))

    def test_config_validation(self):
        with self.assertRaises(InvalidConfig):
            LabelingConfig(S=0.0)
        with self.assertRaises(InvalidConfig):
            LabelingConfig(epsilon=1.0)

    def test_smoothed_label_must_sum_to_one(self):
        with self.assertRaises(NonDistribution):
            SmoothedLabel(0.5, 0.6)


class HardLabelTests(SimpleTestCase):
    def test_threshold_is_strict(self):
        self.assertEqual(hard_label(0.05, 0.05), BENIGN)
        self.assertEqual(hard_label(0.0501, 0.05), MALIGNANT)

    def test_negative_slides_are_benign_whatever_the_mask(self):
        patch = make_patch(mask=square_mask(16, 0, 0, 16))
        labeled = label_patches([patch], slide_positive=False, S=0.05)
        self.assertEqual(labeled[0].hard_label, BENIGN)
        self.assertEqual(labeled[0].a1, 256)

    def test_positive_slide_labels_from_ratio(self):
        patches = [make_patch(mask=square_mask(16, 0, 0, 8)), make_patch(mask=square_mask(16, 0, 0, 2))]
        labeled = label_patches(patches, slide_positive=True, S=0.05)
        self.assertEqual([item.hard_label for item in labeled], [MALIGNANT, BENIGN])
        self.assertAlmostEqual(labeled[0].ratio, 0.25)
        self.assertEqual(compute_a1_max(labeled), 64)


class CrossEntropyTests(SimpleTestCase):
    def test_matches_hand_value(self):
        loss = soft_target_cross_entropy([0.2, 0.8], SmoothedLabel(0.1, 0.9))
        self.assertAlmostEqual(loss, -(0.1 * math.log(0.2) + 0.9 * math.log(0.8)), delta=1e-12)

    def test_rejects_non_distribution(self):
        with self.assertRaises(NonDistribution):
            soft_target_cross_entropy([0.5, 0.6], SmoothedLabel(0.0, 1.0))
        with self.assertRaises(NonDistribution):
            soft_target_cross_entropy([0.0, 1.0], SmoothedLabel(0.0, 1.0))


class SamplingTests(SimpleTestCase):
    def setUp(self):
        positive = label_patches(
            [make_patch('pos', x=i, mask=square_mask(16, 0, 0, 8 if i < 5 else 1)) for i in range(10)],
            slide_positive=True, S=0.05,
        )
        negative = label_patches([make_patch('neg', x=i) for i in range(8)], slide_positive=False, S=0.05)
        self.candidates = positive + negative
        attach_targets(self.candidates, LabelingConfig(a1_max=compute_a1_max(self.candidates)))

    def test_balanced_and_capped_by_minority(self):
        sampled = sample_training_patches(self.candidates, 100, seed=0)
        self.assertEqual(len(sampled), 10)
        self.assertEqual(sum(item.hard_label == MALIGNANT for item in sampled), 5)
        self.assertTrue(all(not item.slide_positive for item in sampled if item.hard_label == BENIGN))

    def test_within_positive_slides(self):
        sampled = sample_training_patches(self.candidates, 100, seed=0, within_positive_slides=True)
        self.assertTrue(all(item.slide_positive for item in sampled))
        self.assertEqual(len(sampled), 10)

    def test_deterministic_for_a_seed(self):
        first = sample_training_patches(self.candidates, 6, seed=4)
        second = sample_training_patches(self.candidates, 6, seed=4)
        self.assertEqual([i.patch.key for i in first], [i.patch.key for i in second])

    def test_missing_class(self):
        negatives = [c for c in self.candidates if not c.slide_positive]
        with self.assertRaises(EmptyClass):
            sample_training_patches(negatives, 10, seed=0)


class AugmentationTests(SimpleTestCase):
    def test_flip_moves_pixels_and_mask_together(self):
        patch = make_patch(mask=square_mask(16, 0, 0, 4))
        flipped = flip_patch(patch, axis=1)
        np.testing.assert_array_equal(flipped.pixels, patch.pixels[:, ::-1])
        self.assertEqual(flipped.mask_crop[0, 15], 1)
        self.assertEqual(flipped.mask_crop[0, 0], 0)

    def test_brightness_contrast_clips(self):
        pixels = np.array([[[0, 128, 250]]], dtype=np.uint8)
        out = brightness_contrast(pixels, 1.2, 25)
        np.testing.assert_array_equal(out, [[[25, 179, 255]]])

    def test_augmentation_is_deterministic_and_keeps_masks_binary(self):
        patch = make_patch(size=32, mask=square_mask(32, 8, 8, 12))
        cfg = AugmentConfig(p_flip=1.0, p_brightness_contrast=1.0, p_grid_distortion=1.0)
        first = augment_patch(patch, 9, cfg)
        second = augment_patch(patch, 9, cfg)
        np.testing.assert_array_equal(first.pixels, second.pixels)
        np.testing.assert_array_equal(first.mask_crop, second.mask_crop)
        self.assertTrue(set(np.unique(first.mask_crop)) <= {0, 1})
        self.assertEqual(first.pixels.dtype, np.uint8)

    def test_disabled_augmentation_is_identity(self):
        patch = make_patch(mask=square_mask(16, 0, 0, 4))
        cfg = AugmentConfig(fold_aug=False, p_brightness_contrast=0.0, p_grid_distortion=0.0)
        out = augment_patch(patch, 1, cfg)
        np.testing.assert_array_equal(out.pixels, patch.pixels)
        np.testing.assert_array_equal(out.mask_crop, patch.mask_crop)

    def test_flipping_twice_restores_the_patch(self):
        patch = make_patch(seed=2, mask=square_mask(16, 1, 3, 5))
        for axis in (0, 1):
            twice = flip_patch(flip_patch(patch, axis), axis)
            np.testing.assert_array_equal(twice.pixels, patch.pixels)
            np.testing.assert_array_equal(twice.mask_crop, patch.mask_crop)

    def test_integer_shift_moves_marker_and_mask_alike(self):
        mask = square_mask(16, 6, 6, 3)
        patch = make_patch(value=0, mask=mask)
        patch.pixels[mask == 1] = 255
        dy = np.full((16, 16), 2.0)
        dx = np.full((16, 16), -1.0)
        moved = apply_displacement(patch, dy, dx)
        expected = square_mask(16, 4, 7, 3)
        np.testing.assert_array_equal(moved.mask_crop, expected)
        np.testing.assert_array_equal(moved.pixels[..., 0] == 255, expected == 1)

    def test_distortion_keeps_marker_and_mask_aligned(self):
        mask = square_mask(24, 8, 6, 8)
        patch = make_patch(size=24, value=0, mask=mask)
        patch.pixels[mask == 1] = 255
        cfg = AugmentConfig(p_flip=1.0, p_brightness_contrast=0.0, p_grid_distortion=1.0)
        for seed in range(10):
            out = augment_patch(patch, seed, cfg)
            mask_centroid = np.argwhere(out.mask_crop == 1).mean(axis=0)
            marker_centroid = np.argwhere(out.pixels[..., 0] >= 128).mean(axis=0)
            self.assertLessEqual(float(np.abs(mask_centroid - marker_centroid).max()), 1.0, seed)
