import copy
import math
from dataclasses import replace

import numpy as np
import torch
import torch.nn as nn
from django.test import SimpleTestCase
from torch.utils.data import ConcatDataset, DataLoader, TensorDataset

from wsi_pipeline.adversarial import (
    AdvWeights, DomainTag, MirrorDiscriminator, SegTrainConfig, TrainSchedule, adv_loss, adv_loss_mask,
    _loader, _paired, build_discriminators, d_loss, d_loss_mask, domain_split, frozen, full_loss, generator_losses,
    lookahead_radam, require_both_domains, run_schedule,
)
from wsi_pipeline.backbone import BackboneConfig, build_backbone, dice_loss
from wsi_pipeline.exceptions import DegenerateData, EmptyDomain, EmptyInput, InvalidConfig, ShapeIncompatible

from .helpers import make_patch
from .test_backbone import flag_matrix


class FirstValueDiscriminator(nn.Module):
    """Reads its probability straight from the first element of the first tap."""

    def __init__(self):
        super().__init__()
        self.scale = nn.Parameter(torch.ones(()))

    def forward(self, taps):
        return taps[0].flatten(1)[:, 0] * self.scale


class MeanMaskDiscriminator(nn.Module):
    def __init__(self):
        super().__init__()
        self.scale = nn.Parameter(torch.ones(()))

    def forward(self, masks):
        return masks.mean(dim=(1, 2, 3)) * self.scale


class ConstantDiscriminator(nn.Module):
    def __init__(self, probability):
        super().__init__()
        self.probability = nn.Parameter(torch.tensor(probability, dtype=torch.float64))

    def forward(self, taps):
        return self.probability.expand(taps[0].size(0))


def taps_with(values):
    return [torch.tensor(values, dtype=torch.float64).view(-1, 1, 1, 1)]


class LossOracleTests(SimpleTestCase):
    def test_discriminator_loss(self):
        loss = d_loss(FirstValueDiscriminator().double(), taps_with([0.9, 0.8]), taps_with([0.2, 0.1]))
        expected = -(math.log(0.9) + math.log(0.8)) / 2 - (math.log(0.8) + math.log(0.9)) / 2
        self.assertAlmostEqual(loss.item(), expected, delta=1e-6)

    def test_generator_loss_flips_labels(self):
        loss = adv_loss(FirstValueDiscriminator().double(), taps_with([0.2, 0.1]), taps_with([0.9, 0.8]))
        expected = -(math.log(0.2) + math.log(0.1)) / 2 - (math.log(0.1) + math.log(0.2)) / 2
        self.assertAlmostEqual(loss.item(), expected, delta=1e-6)

    def test_mask_discriminator_loss(self):
        gt = torch.ones(2, 1, 4, 4, dtype=torch.float64)
        pred = torch.full((2, 1, 4, 4), 0.25, dtype=torch.float64)
        loss = d_loss_mask(MeanMaskDiscriminator().double(), gt, pred)
        self.assertAlmostEqual(loss.item(), -math.log(0.75), delta=1e-6)

    def test_mask_adversarial_forms(self):
        pred = torch.full((2, 1, 4, 4), 0.25, dtype=torch.float64)
        dm = MeanMaskDiscriminator().double()
        self.assertAlmostEqual(adv_loss_mask(dm, pred, 'as_printed').item(), -math.log(0.75), delta=1e-6)
        self.assertAlmostEqual(adv_loss_mask(dm, pred, 'conventional').item(), -math.log(0.25), delta=1e-6)
        with self.assertRaises(InvalidConfig):
            adv_loss_mask(dm, pred, 'other')

    def test_full_loss(self):
        total = full_loss(1.0, 2.0, 3.0, 4.0, AdvWeights(0.01, 0.001, 0.001))
        self.assertAlmostEqual(total, 1.027, delta=1e-12)

        self.assertAlmostEqual(full_loss(0.5, 1.0, 2.0, 3.0, AdvWeights(0.01, 0.001, 0.001)), 0.515, delta=1e-12)

    def test_full_loss_is_affine_in_each_weight(self):
        terms = (0.7, 1.3, 2.9)
        base = AdvWeights(0.01, 0.001, 0.001)
        for slot, name in enumerate(('alpha_e', 'alpha_d', 'alpha_m')):
            for h in (0.5, 2.0):
                bumped = replace(base, **{name: getattr(base, name) + h})
                delta = full_loss(0.4, *terms, bumped) - full_loss(0.4, *terms, base)
                self.assertAlmostEqual(delta, h * terms[slot], delta=1e-12)

    def test_discriminator_and_generator_losses_agree_on_a_constant_discriminator(self):
        a, b = taps_with([0.3, 0.6, 0.1]), taps_with([0.8, 0.2, 0.5])
        for c in (0.1, 0.5, 0.9):
            disc = ConstantDiscriminator(c)
            expected = -math.log(c) - math.log(1 - c)
            self.assertAlmostEqual(d_loss(disc, b, a).item(), expected, delta=1e-12)
            self.assertAlmostEqual(adv_loss(disc, a, b).item(), expected, delta=1e-12)

    def test_saturated_probabilities_stay_finite(self):
        loss = d_loss(FirstValueDiscriminator().double(), taps_with([0.0]), taps_with([1.0]))
        self.assertTrue(math.isfinite(loss.item()))

    def test_weights_must_be_non_negative(self):
        with self.assertRaises(InvalidConfig):
            AdvWeights(alpha_e=-0.1)


class FrozenTests(SimpleTestCase):
    def test_parameters_are_restored(self):
        module = nn.Linear(2, 2)
        module.bias.requires_grad_(False)
        with frozen(module):
            self.assertFalse(any(p.requires_grad for p in module.parameters()))
        self.assertTrue(module.weight.requires_grad)
        self.assertFalse(module.bias.requires_grad)


class MirrorDiscriminatorTests(SimpleTestCase):
    def test_no_cropping_and_gradient_isolation(self):
        for cfg in flag_matrix():
            for size in (32, 64):
                with self.subTest(cfg=cfg, size=size):
                    self.check_configuration(cfg, size)

    def check_configuration(self, cfg, size):
        torch.manual_seed(0)
        model = build_backbone(cfg)
        discs = build_discriminators(model, size, width=8)
        model.train()
        images = torch.rand(4, 3, size, size)
        _, enc, dec = model.forward_with_taps(images)

        for disc, taps in ((discs.encoder, enc), (discs.decoder, dec)):
            out = disc(list(taps))
            self.assertEqual(tuple(out.shape), (4,))
            self.assertEqual(len(disc.last_concat_shapes), len(taps) - 1)
            for concat_shape, tap_shape in disc.last_concat_shapes:
                self.assertEqual(concat_shape[-2:], tap_shape[-2:])

        # discriminator losses leave the generator untouched
        model.zero_grad()
        (d_loss(discs.encoder, enc[:2], enc[2:]) + d_loss(discs.decoder, dec[:2], dec[2:])).backward()
        self.assertTrue(all(p.grad is None or not p.grad.any() for p in model.parameters()))
        self.assertTrue(any(p.grad is not None and p.grad.any() for p in discs.encoder.parameters()))

        # generator losses leave the discriminators untouched
        for module in discs.modules():
            module.zero_grad(set_to_none=True)
        model.zero_grad(set_to_none=True)
        pred, enc, dec = model.forward_with_taps(images)
        (adv_loss(discs.encoder, enc[:2], enc[2:]) + adv_loss(discs.decoder, dec[:2], dec[2:])
         + adv_loss_mask(discs.mask, pred)).backward()
        self.assertTrue(all(p.grad is None for p in discs.parameters()))
        self.assertTrue(any(p.grad is not None and p.grad.any() for p in model.parameters()))

    def test_incompatible_taps(self):
        with self.assertRaises(ShapeIncompatible):
            MirrorDiscriminator('encoder', [(8, 16, 16), (8, 5, 5)])
        with self.assertRaises(ShapeIncompatible):
            MirrorDiscriminator('decoder', [(8, 16, 16), (8, 8, 8)])
        with self.assertRaises(ShapeIncompatible):
            MirrorDiscriminator('sideways', [(8, 16, 16)])


class DomainSplitTests(SimpleTestCase):
    def test_two_stains_are_separated_in_input_order(self):
        pink = [make_patch(x=i, value=200) for i in range(5)]
        purple = [make_patch(x=10 + i, value=90) for i in range(3)]
        patches = [pink[0], purple[0], pink[1], pink[2], purple[1], pink[3], purple[2], pink[4]]
        for i, patch in enumerate(patches):
            patch.pixels[0, 0, 0] = i
        tags = domain_split(patches, seed=0)
        expected = [DomainTag.A, DomainTag.B, DomainTag.A, DomainTag.A, DomainTag.B, DomainTag.A, DomainTag.B, DomainTag.A]
        self.assertEqual(tags, expected)

    def test_input_order_does_not_change_the_tags(self):
        patches = [make_patch(x=i, value=200, seed=i) for i in range(5)] + [make_patch(x=10 + i, value=90, seed=i) for i in range(3)]
        for i, patch in enumerate(patches):
            patch.pixels[0, 0, 0] = i
        tags = domain_split(patches, seed=0)
        rng = np.random.default_rng(3)
        for _ in range(5):
            order = rng.permutation(len(patches))
            shuffled = domain_split([patches[i] for i in order], seed=0)
            self.assertEqual(shuffled, [tags[i] for i in order])

    def test_equal_clusters_give_a_to_the_darker_stain(self):
        bright = [make_patch(x=i, value=200) for i in range(2)]
        dark = [make_patch(x=10 + i, value=60) for i in range(2)]
        patches = [bright[0], dark[0], bright[1], dark[1]]
        for i, patch in enumerate(patches):
            patch.pixels[0, 0, 0] += i
        self.assertEqual(domain_split(patches, seed=0), [DomainTag.B, DomainTag.A, DomainTag.B, DomainTag.A])

    def test_identical_patches_all_fall_in_a(self):
        patches = [make_patch(x=i, value=128) for i in range(4)]
        self.assertEqual(domain_split(patches, seed=0), [DomainTag.A] * 4)
        with self.assertRaises(DegenerateData):
            domain_split(patches, seed=0, strict=True)

    def test_needs_two_patches(self):
        with self.assertRaises(EmptyInput):
            domain_split([make_patch()], seed=0)


def toy_dataset(n, seed, brightness):
    generator = torch.Generator().manual_seed(seed)
    images = torch.rand(n, 3, 32, 32, generator=generator) * 0.2 + brightness
    masks = torch.zeros(n, 1, 32, 32)
    masks[:, :, 8:24, 8:24] = 1
    return TensorDataset(images, masks)


class ScheduleTests(SimpleTestCase):
    def setUp(self):
        torch.manual_seed(0)
        self.model = build_backbone(BackboneConfig(input_size=32))
        self.discs = build_discriminators(self.model, 32, width=8)
        self.sched = TrainSchedule(s0=1, d0=1, alt_epochs=1, steps_per_phase=2)

    def test_both_domains_emit_all_adversarial_series(self):
        report = run_schedule(self.model, self.discs, toy_dataset(10, 0, 0.6), toy_dataset(10, 1, 0.2),
                              self.sched, AdvWeights(), SegTrainConfig(batch_size=4, disc_width=8), seed=0)
        self.assertTrue(report.adversarial)
        for name, values in report.adversarial_series().items():
            self.assertTrue(values, name)
            self.assertTrue(all(np.isfinite(values)), name)
        self.assertEqual(len(report.series['L_seg']), self.sched.s0 + self.sched.alt_epochs)
        self.assertEqual(len(report.series['L_De']), self.sched.d0 + self.sched.alt_epochs)
        self.assertEqual([p['phase'] for p in report.phases], ['seg', 'disc', 'alt-disc', 'alt-gen'])

    def test_single_domain_degrades_to_segmentation_only(self):
        report = run_schedule(self.model, self.discs, toy_dataset(6, 0, 0.6), TensorDataset(
            torch.zeros(0, 3, 32, 32), torch.zeros(0, 1, 32, 32)), self.sched, AdvWeights(),
            SegTrainConfig(batch_size=4), seed=0)
        self.assertFalse(report.adversarial)
        self.assertEqual(len(report.series['L_seg']), self.sched.s0 + self.sched.alt_epochs)
        self.assertFalse(any(report.adversarial_series().values()))

    def test_generator_losses_combine_into_full_loss(self):
        images_a, masks_a = toy_dataset(2, 0, 0.6).tensors
        images_b, masks_b = toy_dataset(2, 1, 0.2).tensors
        w = AdvWeights(0.5, 0.25, 0.125)
        losses = generator_losses(self.model, self.discs, images_a, masks_a, images_b, masks_b, w)
        expected = full_loss(losses['L_seg'], losses['adv_e'], losses['adv_d'], losses['adv_m'], w)
        self.assertAlmostEqual(losses['L_full'].item(), expected.item(), delta=1e-6)

    def test_schedule_validation(self):
        with self.assertRaises(InvalidConfig):
            TrainSchedule(s0=-1)
        with self.assertRaises(InvalidConfig):
            TrainSchedule(steps_per_phase=0)
        with self.assertRaises(InvalidConfig):
            SegTrainConfig(dm_adv_form='other')

    def test_empty_domain_is_a_data_error(self):
        empty = TensorDataset(torch.zeros(0, 3, 32, 32), torch.zeros(0, 1, 32, 32))
        with self.assertRaises(EmptyDomain) as cm:
            require_both_domains(toy_dataset(2, 0, 0.6), empty)
        self.assertEqual(cm.exception.exit_code, 3)
        require_both_domains(toy_dataset(2, 0, 0.6), toy_dataset(2, 1, 0.2))

    def test_lookahead_settings_are_validated(self):
        with self.assertRaises(InvalidConfig):
            SegTrainConfig(lookahead_k=0)
        with self.assertRaises(InvalidConfig):
            SegTrainConfig(lookahead_alpha=1.5)


class TrailingBatchTests(SimpleTestCase):
    def setUp(self):
        torch.manual_seed(0)
        self.model = build_backbone(BackboneConfig(input_size=32, atrous=False))
        self.discs = build_discriminators(self.model, 32, width=8)

    def test_loader_drops_a_short_trailing_batch(self):
        self.assertEqual([len(images) for images, _ in _loader(toy_dataset(5, 0, 0.5), 4, 0)], [4])
        self.assertEqual([len(images) for images, _ in _loader(toy_dataset(3, 0, 0.5), 4, 0)], [3])

    def test_odd_sized_domain_trains_segmentation_only(self):
        empty = TensorDataset(torch.zeros(0, 3, 32, 32), torch.zeros(0, 1, 32, 32))
        report = run_schedule(self.model, self.discs, toy_dataset(5, 0, 0.6), empty,
                              TrainSchedule(s0=1, d0=0, alt_epochs=0), AdvWeights(), SegTrainConfig(batch_size=4))
        self.assertFalse(report.adversarial)
        self.assertTrue(all(np.isfinite(report.series['L_seg'])))

    def test_odd_sized_domains_train_adversarially(self):
        report = run_schedule(self.model, self.discs, toy_dataset(5, 0, 0.6), toy_dataset(5, 1, 0.2),
                              TrainSchedule(s0=1, d0=1, alt_epochs=1), AdvWeights(),
                              SegTrainConfig(batch_size=4, disc_width=8))
        self.assertTrue(report.adversarial)
        for name, values in report.series.items():
            self.assertTrue(all(np.isfinite(values)), name)


class ScheduleEquivalenceTests(SimpleTestCase):
    def setUp(self):
        torch.manual_seed(0)
        self.model = build_backbone(BackboneConfig(input_size=32))
        self.discs = build_discriminators(self.model, 32, width=8)
        self.reference = copy.deepcopy(self.model)
        self.data_a = toy_dataset(5, 0, 0.6)
        self.data_b = toy_dataset(5, 1, 0.2)
        self.cfg = SegTrainConfig(batch_size=4, disc_width=8)

    def optimizer_for(self, model):
        cfg = self.cfg
        return lookahead_radam(model.parameters(), cfg.lr, cfg.betas, cfg.weight_decay,
                               cfg.lookahead_k, cfg.lookahead_alpha)

    def assert_same_weights(self, left, right):
        for (name, a), b in zip(left.state_dict().items(), right.state_dict().values()):
            self.assertTrue(torch.equal(a, b), name)

    def test_segmentation_only_schedule_is_plain_training(self):
        run_schedule(self.model, self.discs, self.data_a, self.data_b,
                     TrainSchedule(s0=1, d0=0, alt_epochs=0), AdvWeights(), self.cfg, seed=0)

        model = self.reference
        optimizer = self.optimizer_for(model)
        loader = DataLoader(ConcatDataset([self.data_a, self.data_b]), batch_size=4, shuffle=True,
                            generator=torch.Generator().manual_seed(0), drop_last=True)
        model.train()
        for images, masks in loader:
            optimizer.zero_grad()
            dice_loss(model(images), masks).backward()
            optimizer.step()
        self.assert_same_weights(self.model, model)

    def test_zero_adversarial_weights_give_segmentation_updates(self):
        steps = 2
        run_schedule(self.model, self.discs, self.data_a, self.data_b,
                     TrainSchedule(s0=0, d0=0, alt_epochs=1, steps_per_phase=steps), AdvWeights(0.0, 0.0, 0.0),
                     self.cfg, seed=0)

        model = self.reference
        optimizer = self.optimizer_for(model)
        loader_a = _loader(self.data_a, 4, 1)
        loader_b = _loader(self.data_b, 4, 2)
        # the discriminator pass draws its batches first
        for _ in _paired(loader_a, loader_b, steps):
            pass
        model.train()
        for (img_a, mask_a), (img_b, mask_b) in _paired(loader_a, loader_b, steps):
            optimizer.zero_grad()
            pred_a = model(img_a)
            pred_b = model(img_b)
            dice_loss(torch.cat([pred_a, pred_b]), torch.cat([mask_a, mask_b])).backward()
            optimizer.step()
        self.assert_same_weights(self.model, model)


class LookaheadTests(SimpleTestCase):
    def test_fast_weights_are_pulled_to_the_slow_weights_every_k_steps(self):
        torch.manual_seed(0)
        wrapped_layer = nn.Linear(3, 1)
        plain_layer = copy.deepcopy(wrapped_layer)
        x, y = torch.randn(8, 3), torch.randn(8, 1)
        k, alpha = 3, 0.5
        wrapped = lookahead_radam(wrapped_layer.parameters(), 1e-2, (0.9, 0.999), 0.0, k, alpha)
        plain = torch.optim.RAdam(plain_layer.parameters(), lr=1e-2, betas=(0.9, 0.999))

        def step(layer, optimizer):
            optimizer.zero_grad()
            nn.functional.mse_loss(layer(x), y).backward()
            optimizer.step()

        step(wrapped_layer, wrapped)
        step(plain_layer, plain)
        slow = [p.detach().clone() for p in wrapped_layer.parameters()]
        for _ in range(k - 1):
            step(wrapped_layer, wrapped)
            step(plain_layer, plain)
        for p, q in zip(wrapped_layer.parameters(), plain_layer.parameters()):
            torch.testing.assert_close(p, q)

        step(wrapped_layer, wrapped)
        step(plain_layer, plain)
        for p, q, s in zip(wrapped_layer.parameters(), plain_layer.parameters(), slow):
            torch.testing.assert_close(p.detach(), s + alpha * (q.detach() - s))
            self.assertFalse(torch.allclose(p, q))
