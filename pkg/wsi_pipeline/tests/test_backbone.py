import itertools

import torch
from django.test import SimpleTestCase

from wsi_pipeline.backbone import (
    IBN, BackboneConfig, CACUNet, HypercolumnHead, PyramidPooling, SCSEBlock, build_backbone, dice_loss,
    forward_with_taps, hypercolumn_head, scse_apply,
)
from wsi_pipeline.exceptions import BadShape, InvalidConfig, ShapeMismatch

FLAG_NAMES = ('atrous', 'ppm', 'scse', 'hypercolumn')


def flag_matrix():
    """Every on/off combination of the four architecture flags, both presets."""
    for preset in ('tiny', 'small'):
        for flags in itertools.product((False, True), repeat=len(FLAG_NAMES)):
            yield BackboneConfig(encoder_depth_preset=preset, input_size=64, **dict(zip(FLAG_NAMES, flags)))


class BackboneConfigTests(SimpleTestCase):
    def test_defaults(self):
        cfg = BackboneConfig()
        self.assertEqual(cfg.ibn_stages, (2, 3, 4))
        self.assertEqual(cfg.atrous_rates, (2, 4))
        self.assertEqual(cfg.ppm_scales, (1, 2, 3, 6))
        self.assertEqual(cfg.input_size, 512)

    def test_invalid_values(self):
        with self.assertRaises(InvalidConfig):
            BackboneConfig(encoder_depth_preset='huge')
        with self.assertRaises(InvalidConfig):
            BackboneConfig(input_size=48)
        with self.assertRaises(InvalidConfig):
            BackboneConfig(ibn_stages=(1,))
        with self.assertRaises(InvalidConfig):
            BackboneConfig(ppm_scales=(2, 1))

    def test_dict_round_trip_rebuilds_same_config(self):
        cfg = BackboneConfig(encoder_depth_preset='small', ibn_stages=(3,), atrous=False)
        self.assertEqual(BackboneConfig.from_dict(cfg.to_dict()), cfg)


class ShapeContractTests(SimpleTestCase):
    def assert_contract(self, model, size):
        batch = torch.rand(2, 3, size, size)
        with torch.no_grad():
            mask, encoder_taps, decoder_taps = forward_with_taps(model, batch)
        self.assertEqual(tuple(mask.shape), (2, 1, size, size))
        self.assertTrue(bool(((mask >= 0) & (mask <= 1)).all()))

        atrous = model.cfg.atrous
        strides = (2, 4, 8, 8 if atrous else 16, 8 if atrous else 32)
        self.assertEqual(len(encoder_taps), 5)
        for tap, stride, channels in zip(encoder_taps, strides, model.encoder_channels):
            self.assertEqual(tuple(tap.shape), (2, channels, size // stride, size // stride))

        expected_sizes = [tuple(encoder_taps[i].shape[-2:]) for i in (3, 2, 1, 0)] + [(size, size)]
        self.assertEqual(len(decoder_taps), 5)
        for tap, spatial, channels in zip(decoder_taps, expected_sizes, model.decoder_channels):
            self.assertEqual(tuple(tap.shape), (2, channels) + spatial)

    def test_every_flag_combination_and_preset(self):
        for cfg in flag_matrix():
            model = build_backbone(cfg).eval()
            for size in (32, 64):
                with self.subTest(cfg=cfg, size=size):
                    self.assert_contract(model, size)

    def test_all_flags_off_is_a_plain_unet(self):
        cfg = BackboneConfig(ibn_stages=(), atrous=False, ppm=False, scse=False, hypercolumn=False, input_size=32)
        model = build_backbone(cfg).eval()
        self.assertFalse(any(isinstance(m, (IBN, PyramidPooling, SCSEBlock)) for m in model.modules()))
        self.assert_contract(model, 32)

    def test_components_follow_flags(self):
        model = build_backbone(BackboneConfig(input_size=64))
        self.assertEqual(sum(isinstance(m, SCSEBlock) for m in model.modules()), 5)
        self.assertEqual(sum(isinstance(m, PyramidPooling) for m in model.modules()), 1)
        self.assertTrue(any(isinstance(m, IBN) for m in model.modules()))

    def test_rejects_bad_inputs(self):
        model = build_backbone(BackboneConfig(input_size=32)).eval()
        with self.assertRaises(BadShape):
            model(torch.rand(1, 1, 32, 32))
        with self.assertRaises(BadShape):
            model(torch.rand(1, 3, 48, 40))

    def test_describe_lists_channels(self):
        model = CACUNet(BackboneConfig(input_size=64))
        description = model.describe()
        self.assertEqual(description['backbone']['input_size'], 64)
        self.assertEqual(len(description['decoder_channels']), 5)

    def test_duplicated_rows_give_identical_outputs_in_eval_mode(self):
        torch.manual_seed(0)
        model = build_backbone(BackboneConfig(input_size=32)).eval()
        row = torch.rand(1, 3, 32, 32)
        with torch.no_grad():
            mask = model(torch.cat([row, row, row]))
        torch.testing.assert_close(mask[0], mask[1], rtol=0, atol=1e-6)
        torch.testing.assert_close(mask[0], mask[2], rtol=0, atol=1e-6)


class PyramidPoolingTests(SimpleTestCase):
    def test_one_branch_of_a_quarter_width_per_scale(self):
        ppm = PyramidPooling(16, (1, 2, 3, 6))
        self.assertEqual(ppm.out_channels, 16 + 4 * 4)
        out = ppm(torch.rand(2, 16, 6, 6))
        self.assertEqual(tuple(out.shape), (2, 32, 6, 6))


class HypercolumnHeadTests(SimpleTestCase):
    def test_single_full_resolution_tap_is_a_projection(self):
        head = HypercolumnHead([4])
        tap = torch.rand(2, 4, 8, 8)
        with torch.no_grad():
            torch.testing.assert_close(hypercolumn_head(head, [tap]), torch.sigmoid(head.project(tap)))

    def test_taps_are_upsampled_and_concatenated(self):
        head = HypercolumnHead([6, 4])
        self.assertEqual(head.project.in_channels, 10)
        with torch.no_grad():
            out = hypercolumn_head(head, [torch.rand(1, 6, 4, 4), torch.rand(1, 4, 8, 8)])
        self.assertEqual(tuple(out.shape), (1, 1, 8, 8))

    def test_constant_taps_give_a_constant_map(self):
        head = HypercolumnHead([3, 2])
        taps = [torch.full((1, 3, 4, 4), 0.7), torch.full((1, 2, 16, 16), -0.3)]
        with torch.no_grad():
            out = hypercolumn_head(head, taps, size=(16, 16))
        torch.testing.assert_close(out, torch.full_like(out, out[0, 0, 0, 0].item()), rtol=0, atol=1e-6)


class ScseTests(SimpleTestCase):
    def test_gating_keeps_shape(self):
        block = SCSEBlock(16)
        features = torch.rand(16, 4, 4)
        self.assertEqual(tuple(scse_apply(block, features).shape), (16, 4, 4))

    def test_max_of_gates(self):
        block = SCSEBlock(16)
        x = torch.rand(2, 16, 4, 4)
        expected = torch.max(x * block.channel_gate(x), x * block.spatial_gate(x))
        torch.testing.assert_close(block(x), expected)

    def test_saturated_gates_are_the_identity(self):
        block = SCSEBlock(16)
        with torch.no_grad():
            for conv in (block.cse[3], block.sse[0]):
                conv.weight.zero_()
                conv.bias.fill_(100.0)
        x = torch.randn(2, 16, 4, 4)
        self.assertTrue(torch.equal(block(x), x))

    def test_zero_input_gives_zero_output(self):
        x = torch.zeros(1, 16, 4, 4)
        self.assertFalse(SCSEBlock(16)(x).any())

    def test_output_never_exceeds_input_magnitude(self):
        torch.manual_seed(1)
        block = SCSEBlock(32)
        for _ in range(10):
            x = torch.randn(2, 32, 5, 5) * 3
            with torch.no_grad():
                out = block(x)
            self.assertTrue(bool((out.abs() <= x.abs()).all()))


class DiceLossTests(SimpleTestCase):
    def test_perfect_prediction_has_zero_loss(self):
        target = torch.zeros(1, 1, 8, 8)
        target[..., 2:5, 2:5] = 1
        self.assertAlmostEqual(dice_loss(target.clone(), target).item(), 0.0, delta=1e-7)
        self.assertAlmostEqual(dice_loss(torch.zeros(1, 1, 8, 8), torch.zeros(1, 1, 8, 8)).item(), 0.0, delta=1e-7)

    def test_hand_computed_value(self):
        pred = torch.full((1, 1, 2, 2), 0.5)
        target = torch.tensor([[[[1.0, 0.0], [0.0, 0.0]]]])
        # 1 - (2 * 0.5 + 1) / (2 + 1 + 1)
        self.assertAlmostEqual(dice_loss(pred, target).item(), 0.5, delta=1e-7)

    def test_gradient_matches_finite_differences(self):
        generator = torch.Generator().manual_seed(0)
        for _ in range(50):
            pred = torch.rand(1, 1, 8, 8, generator=generator, dtype=torch.float64, requires_grad=True)
            target = (torch.rand(1, 1, 8, 8, generator=generator, dtype=torch.float64) > 0.5).double()
            self.assertTrue(torch.autograd.gradcheck(
                lambda p: dice_loss(p, target), (pred,), eps=1e-4, atol=1e-8, rtol=1e-3,
            ))

    def test_all_zero_prediction_against_full_target(self):
        loss = dice_loss(torch.zeros(1, 1, 4, 4), torch.ones(1, 1, 4, 4))
        self.assertAlmostEqual(loss.item(), 1 - 1 / 17, delta=1e-7)

    def test_loss_stays_in_unit_interval(self):
        generator = torch.Generator().manual_seed(2)
        for _ in range(200):
            pred = torch.rand(3, 1, 8, 8, generator=generator)
            target = (torch.rand(3, 1, 8, 8, generator=generator) > 0.7).float()
            loss = dice_loss(pred, target).item()
            self.assertGreaterEqual(loss, 0.0)
            self.assertLessEqual(loss, 1.0)

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeMismatch):
            dice_loss(torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 4, 5))


class LearningSmokeTests(SimpleTestCase):
    def test_one_step_lowers_the_dice_loss(self):
        torch.manual_seed(0)
        model = build_backbone(BackboneConfig(input_size=32))
        model.train()
        image = torch.rand(1, 3, 32, 32)
        mask = torch.zeros(1, 1, 32, 32)
        mask[..., 8:24, 8:24] = 1
        optimizer = torch.optim.SGD(model.parameters(), lr=0.01)
        before = dice_loss(model(image), mask)
        optimizer.zero_grad()
        before.backward()
        optimizer.step()
        with torch.no_grad():
            after = dice_loss(model(image), mask)
        self.assertLess(after.item(), before.item())
