"""
Domain-adversarial training of the segmentation network.

Two mirror discriminators read every encoder / decoder tap of the generator,
a mask discriminator separates predicted masks from expert masks, and the
training schedule alternates discriminator and generator passes.

Domain B is the "real" class of the feature discriminators: they are trained
to output 1 on domain-B taps and 0 on domain-A taps, while the generator is
trained with the flipped labels.
"""
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from enum import Enum
from itertools import cycle
from typing import Optional, Sequence
import logging
import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.cluster import KMeans
import torch_optimizer

from .backbone import BackboneConfig, ResidualEncoder, dice_loss
from .exceptions import DegenerateData, EmptyDomain, EmptyInput, InvalidConfig, ShapeIncompatible, ShapeMismatch

logger = logging.getLogger(__name__)

PROB_EPS = 1e-7
DM_FORMS = ('as_printed', 'conventional')


class DomainTag(str, Enum):
    A = 'A'
    B = 'B'


@dataclass(frozen=True)
class AdvWeights:
    alpha_e: float = 0.01
    alpha_d: float = 0.001
    alpha_m: float = 0.001

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise InvalidConfig(f"{name} must be non-negative, got {value}")


@dataclass(frozen=True)
class TrainSchedule:
    s0: int = 4
    d0: int = 1
    alt_epochs: int = 2
    steps_per_phase: Optional[int] = None

    def __post_init__(self):
        for name in ('s0', 'd0', 'alt_epochs'):
            if getattr(self, name) < 0:
                raise InvalidConfig(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.steps_per_phase is not None and self.steps_per_phase < 1:
            raise InvalidConfig(f"steps_per_phase must be >= 1, got {self.steps_per_phase}")


@dataclass(frozen=True)
class SegTrainConfig:
    batch_size: int = 4
    lr: float = 1e-3
    betas: tuple = (0.95, 0.999)
    weight_decay: float = 5e-4
    disc_lr: float = 1e-3
    disc_width: int = 32
    dm_adv_form: str = 'as_printed'
    lookahead_k: int = 5
    lookahead_alpha: float = 0.5

    def __post_init__(self):
        if self.lookahead_k < 1:
            raise InvalidConfig(f"lookahead_k must be >= 1, got {self.lookahead_k}")
        if not 0.0 <= self.lookahead_alpha <= 1.0:
            raise InvalidConfig(f"lookahead_alpha must be in [0, 1], got {self.lookahead_alpha}")
        if self.dm_adv_form not in DM_FORMS:
            raise InvalidConfig(f"dm_adv_form must be one of {DM_FORMS}, got {self.dm_adv_form!r}")
        if self.batch_size < 1:
            raise InvalidConfig(f"batch_size must be >= 1, got {self.batch_size}")


class MirrorDiscriminator(nn.Module):
    """
    Discriminator mirroring the encoder or decoder.

    Layer 1 reads generator tap 1. Every layer resamples its output to the
    size of the next tap (strided conv on the encoder side, upsampling on the
    decoder side), and layer i >= 2 convolves (own features || tap i).
    """

    def __init__(self, side: str, tap_shapes: Sequence[Sequence[int]], width: int = 32):
        super().__init__()
        if side not in ('encoder', 'decoder'):
            raise ShapeIncompatible(f"unknown discriminator side {side!r}")
        if not tap_shapes:
            raise ShapeIncompatible("a mirror discriminator needs at least one tap")
        self.side = side
        self.tap_shapes = [tuple(int(v) for v in shape) for shape in tap_shapes]
        self.last_concat_shapes = []
        layers = []
        for i, (channels, h, w) in enumerate(self.tap_shapes):
            in_channels = channels if i == 0 else width + channels
            target = self.tap_shapes[i + 1][1:] if i + 1 < len(self.tap_shapes) else (h, w)
            layers.append(self._layer(in_channels, width, (h, w), target))
        self.layers = nn.ModuleList(layers)
        self.classifier = nn.Linear(width, 1)

    def _layer(self, in_channels, width, size, target):
        h, w = size
        th, tw = target
        if self.side == 'encoder':
            if (th, tw) == (h, w):
                stride = 1
            elif (th * 2, tw * 2) == (h, w):
                stride = 2
            else:
                raise ShapeIncompatible(f"encoder tap {size} cannot be mirrored onto {target}")
            return _MirrorLayer(in_channels, width, stride=stride)
        if th < h or tw < w:
            raise ShapeIncompatible(f"decoder tap {size} cannot be mirrored onto {target}")
        return _MirrorLayer(in_channels, width, upsample_to=(th, tw))

    def forward(self, taps):
        if len(taps) != len(self.layers):
            raise ShapeIncompatible(f"expected {len(self.layers)} taps, got {len(taps)}")
        self.last_concat_shapes = []
        x = None
        for layer, tap in zip(self.layers, taps):
            if x is None:
                x = tap
            else:
                if x.shape[-2:] != tap.shape[-2:]:
                    raise ShapeIncompatible(f"discriminator features {tuple(x.shape)} do not match tap {tuple(tap.shape)}")
                x = torch.cat([x, tap], dim=1)
                self.last_concat_shapes.append((tuple(x.shape), tuple(tap.shape)))
            x = layer(x)
        pooled = F.adaptive_avg_pool2d(x, 1).flatten(1)
        return torch.sigmoid(self.classifier(pooled)).squeeze(1)


class _MirrorLayer(nn.Module):
    def __init__(self, in_channels, out_channels, stride=1, upsample_to=None):
        super().__init__()
        self.upsample_to = upsample_to
        self.conv = nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1)
        self.act = nn.LeakyReLU(0.2, inplace=True)

    def forward(self, x):
        if self.upsample_to is not None and tuple(x.shape[-2:]) != tuple(self.upsample_to):
            x = F.interpolate(x, size=self.upsample_to, mode='bilinear', align_corners=False)
        return self.act(self.conv(x))


class MaskDiscriminator(nn.Module):
    """The generator's encoder family with a 1-channel stem and a probability head."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.encoder = ResidualEncoder(cfg.preset, in_channels=1, ibn_stages=cfg.ibn_stages, atrous=False)
        self.classifier = nn.Linear(self.encoder.out_channels[-1], 1)

    def forward(self, masks):
        features = self.encoder(masks)[-1]
        pooled = F.adaptive_avg_pool2d(features, 1).flatten(1)
        return torch.sigmoid(self.classifier(pooled)).squeeze(1)


def build_mirror_discriminator(side: str, tap_shapes, width: int = 32) -> MirrorDiscriminator:
    return MirrorDiscriminator(side, tap_shapes, width=width)


@dataclass
class Discriminators:
    encoder: MirrorDiscriminator
    decoder: MirrorDiscriminator
    mask: MaskDiscriminator

    def modules(self):
        return [self.encoder, self.decoder, self.mask]

    def parameters(self):
        return [p for module in self.modules() for p in module.parameters()]

    def train(self, mode=True):
        for module in self.modules():
            module.train(mode)


def build_discriminators(model, input_size: int, width: int = 32) -> Discriminators:
    """Trace the generator once to size both mirrors to its taps."""
    was_training = model.training
    model.eval()
    with torch.no_grad():
        _, encoder_taps, decoder_taps = model.forward_with_taps(torch.zeros(1, 3, input_size, input_size))
    model.train(was_training)
    return Discriminators(
        encoder=build_mirror_discriminator('encoder', [t.shape[1:] for t in encoder_taps], width),
        decoder=build_mirror_discriminator('decoder', [t.shape[1:] for t in decoder_taps], width),
        mask=MaskDiscriminator(model.cfg),
    )


def _log(p):
    return torch.log(p.clamp(PROB_EPS, 1 - PROB_EPS))


@contextmanager
def frozen(module):
    """Build the graph with the module's parameters excluded from autograd."""
    params = list(module.parameters()) if isinstance(module, nn.Module) else []
    previous = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad_(False)
    try:
        yield module
    finally:
        for p, flag in zip(params, previous):
            p.requires_grad_(flag)


def _detached(taps):
    return [t.detach() for t in taps]


def d_loss(disc, taps_batch_B, taps_batch_A) -> torch.Tensor:
    """Discriminator loss on generator taps: B is labeled 1, A is labeled 0."""
    real = disc(_detached(taps_batch_B))
    fake = disc(_detached(taps_batch_A))
    return -_log(real).mean() - _log(1 - fake).mean()


def adv_loss(disc, taps_batch_A, taps_batch_B) -> torch.Tensor:
    """Generator-side loss with flipped labels; the discriminator is frozen."""
    with frozen(disc):
        on_a = disc(list(taps_batch_A))
        on_b = disc(list(taps_batch_B))
    return -_log(on_a).mean() - _log(1 - on_b).mean()


def d_loss_mask(dm, gt_masks, pred_masks) -> torch.Tensor:
    if gt_masks.shape[-2:] != pred_masks.shape[-2:]:
        raise ShapeMismatch(f"ground-truth masks {tuple(gt_masks.shape)} and predictions {tuple(pred_masks.shape)} differ")
    return -_log(dm(gt_masks)).mean() - _log(1 - dm(pred_masks.detach())).mean()


def adv_loss_mask(dm, pred_masks, form: str = 'as_printed') -> torch.Tensor:
    """
    `as_printed` minimizes -E[ln(1 - D_m(G(x)))]; `conventional` minimizes
    -E[ln D_m(G(x))].
    """
    if form not in DM_FORMS:
        raise InvalidConfig(f"dm_adv_form must be one of {DM_FORMS}, got {form!r}")
    with frozen(dm):
        p = dm(pred_masks)
    if form == 'conventional':
        return -_log(p).mean()
    return -_log(1 - p).mean()


def full_loss(seg_loss, adv_e, adv_d, adv_m, w: AdvWeights):
    return seg_loss + w.alpha_e * adv_e + w.alpha_d * adv_d + w.alpha_m * adv_m


def appearance_features(pixels: np.ndarray) -> np.ndarray:
    """Per-channel mean and standard deviation of a patch."""
    flat = pixels.reshape(-1, pixels.shape[-1]).astype(np.float64)
    return np.concatenate([flat.mean(axis=0), flat.std(axis=0)])


def domain_split(patches, seed: int, strict: bool = False) -> list:
    """
    Two-way appearance clustering of training patches, returned as one tag
    per patch in input order. The larger cluster is domain A. When every
    feature vector is identical all patches fall into A, or DegenerateData
    is raised when `strict` is set.
    """
    if len(patches) < 2:
        raise EmptyInput("domain split needs at least two patches")
    features = np.stack([appearance_features(getattr(p, 'pixels', p)) for p in patches])
    if np.all(features == features[0]):
        if strict:
            raise DegenerateData("all patches share one appearance vector")
        logger.warning("All patches share one appearance; domain B is empty and adversarial phases are disabled")
        return [DomainTag.A] * len(patches)
    labels = KMeans(n_clusters=2, n_init=10, random_state=seed).fit_predict(features)
    counts = np.bincount(labels, minlength=2)
    if counts[0] != counts[1]:
        a_cluster = int(np.argmax(counts))
    else:
        # tie: the cluster whose centroid has the smaller norm is A
        norms = [np.linalg.norm(features[labels == k].mean(axis=0)) for k in (0, 1)]
        a_cluster = 0 if norms[0] <= norms[1] else 1
    tags = [DomainTag.A if label == a_cluster else DomainTag.B for label in labels]
    logger.info(f"Domain split: {counts[a_cluster]} patches in A, {len(patches) - counts[a_cluster]} in B")
    return tags


SERIES = ('L_seg', 'L_De', 'L_Dd', 'L_Dm', 'adv_e', 'adv_d', 'adv_m', 'L_full')


@dataclass
class TrainingReport:
    series: dict = field(default_factory=lambda: {name: [] for name in SERIES})
    phases: list = field(default_factory=list)
    adversarial: bool = True

    def record(self, phase, epoch, losses):
        for name, value in losses.items():
            self.series[name].append(float(value))
        self.phases.append({'phase': phase, 'epoch': epoch, **{k: float(v) for k, v in losses.items()}})

    def adversarial_series(self):
        return {name: self.series[name] for name in ('L_De', 'L_Dd', 'L_Dm', 'adv_e', 'adv_d', 'adv_m')}

    def to_dict(self):
        return {'adversarial': self.adversarial, 'series': self.series, 'phases': self.phases}


def _loader(dataset, batch_size, seed):
    generator = torch.Generator()
    generator.manual_seed(seed)
    # a trailing batch of one breaks BatchNorm in train mode
    return torch.utils.data.DataLoader(dataset, batch_size=batch_size, shuffle=True, generator=generator,
                                       drop_last=len(dataset) > batch_size)


def _limited(iterable, steps):
    for step, item in enumerate(iterable):
        if steps is not None and step >= steps:
            return
        yield item


def _paired(loader_a, loader_b, steps):
    """Pair batches of A and B for one pass, cycling the shorter domain."""
    if len(loader_a) >= len(loader_b):
        pairs = zip(loader_a, cycle(loader_b))
    else:
        pairs = ((a, b) for b, a in zip(loader_b, cycle(loader_a)))
    return _limited(pairs, steps)


def _mean(values):
    return math.fsum(values) / len(values) if values else float('nan')


def _seg_epoch(model, optimizer, loader, steps):
    model.train()
    losses = []
    for images, masks in _limited(loader, steps):
        optimizer.zero_grad()
        loss = dice_loss(model(images), masks)
        loss.backward()
        optimizer.step()
        losses.append(loss.item())
    return _mean(losses)


def _disc_epoch(model, discs, optimizer, loader_a, loader_b, steps):
    model.eval()
    discs.train()
    totals = {'L_De': [], 'L_Dd': [], 'L_Dm': []}
    for (img_a, mask_a), (img_b, mask_b) in _paired(loader_a, loader_b, steps):
        with torch.no_grad():
            pred_a, enc_a, dec_a = model.forward_with_taps(img_a)
            pred_b, enc_b, dec_b = model.forward_with_taps(img_b)
        l_de = d_loss(discs.encoder, enc_b, enc_a)
        l_dd = d_loss(discs.decoder, dec_b, dec_a)
        l_dm = d_loss_mask(discs.mask, torch.cat([mask_a, mask_b]), torch.cat([pred_a, pred_b]))
        optimizer.zero_grad()
        (l_de + l_dd + l_dm).backward()
        optimizer.step()
        totals['L_De'].append(l_de.item())
        totals['L_Dd'].append(l_dd.item())
        totals['L_Dm'].append(l_dm.item())
    return {name: _mean(values) for name, values in totals.items()}


def generator_losses(model, discs, img_a, mask_a, img_b, mask_b, w: AdvWeights, dm_form='as_printed'):
    pred_a, enc_a, dec_a = model.forward_with_taps(img_a)
    pred_b, enc_b, dec_b = model.forward_with_taps(img_b)
    seg = dice_loss(torch.cat([pred_a, pred_b]), torch.cat([mask_a, mask_b]))
    adv_e = adv_loss(discs.encoder, enc_a, enc_b)
    adv_d = adv_loss(discs.decoder, dec_a, dec_b)
    adv_m = adv_loss_mask(discs.mask, torch.cat([pred_a, pred_b]), dm_form)
    return {
        'L_seg': seg,
        'adv_e': adv_e,
        'adv_d': adv_d,
        'adv_m': adv_m,
        'L_full': full_loss(seg, adv_e, adv_d, adv_m, w),
    }


def _gen_epoch(model, discs, optimizer, loader_a, loader_b, steps, w, dm_form):
    model.train()
    discs.train(False)
    totals = {name: [] for name in ('L_seg', 'adv_e', 'adv_d', 'adv_m', 'L_full')}
    for (img_a, mask_a), (img_b, mask_b) in _paired(loader_a, loader_b, steps):
        optimizer.zero_grad()
        losses = generator_losses(model, discs, img_a, mask_a, img_b, mask_b, w, dm_form)
        losses['L_full'].backward()
        optimizer.step()
        for name, value in losses.items():
            totals[name].append(value.item())
    return {name: _mean(values) for name, values in totals.items()}


def lookahead_radam(params, lr, betas, weight_decay, k, alpha):
    """RAdam fast weights pulled toward slow weights every k steps."""
    fast = torch.optim.RAdam(params, lr=lr, betas=betas, weight_decay=weight_decay)
    return torch_optimizer.Lookahead(fast, k=k, alpha=alpha)


def make_optimizers(model, discs, train_cfg: SegTrainConfig):
    g_opt = lookahead_radam(model.parameters(), train_cfg.lr, train_cfg.betas, train_cfg.weight_decay,
                            train_cfg.lookahead_k, train_cfg.lookahead_alpha)
    d_opt = lookahead_radam(discs.parameters(), train_cfg.disc_lr, train_cfg.betas, 0.0,
                            train_cfg.lookahead_k, train_cfg.lookahead_alpha)
    return g_opt, d_opt


def require_both_domains(data_A, data_B):
    for name, data in (('A', data_A), ('B', data_B)):
        if len(data) == 0:
            raise EmptyDomain(f"appearance domain {name} has no training patches")


def run_schedule(model, discs: Discriminators, data_A, data_B, sched: TrainSchedule, w: AdvWeights,
                 train_cfg: SegTrainConfig = SegTrainConfig(), seed: int = 0) -> TrainingReport:
    """
    Phase 1: s0 generator-only epochs on L_seg. Phase 2: d0 discriminator-only
    epochs with the generator frozen. Phase 3: alt_epochs of one discriminator
    pass followed by one generator pass on L_full.

    `data_A` / `data_B` are datasets of (image, mask) tensor pairs. With an
    empty domain the run degrades to segmentation-only training for
    s0 + alt_epochs epochs.
    """
    report = TrainingReport()
    g_opt, d_opt = make_optimizers(model, discs, train_cfg)
    steps = sched.steps_per_phase
    combined = torch.utils.data.ConcatDataset([d for d in (data_A, data_B) if len(d)])
    seg_loader = _loader(combined, train_cfg.batch_size, seed)

    try:
        require_both_domains(data_A, data_B)
    except EmptyDomain as exc:
        logger.warning(f"{exc}; running segmentation-only training")
        report.adversarial = False
        for epoch in range(sched.s0 + sched.alt_epochs):
            l_seg = _seg_epoch(model, g_opt, seg_loader, steps)
            report.record('seg', epoch, {'L_seg': l_seg})
            logger.info(f"[seg] epoch {epoch}: L_seg={l_seg:.5f}")
        return report

    loader_a = _loader(data_A, train_cfg.batch_size, seed + 1)
    loader_b = _loader(data_B, train_cfg.batch_size, seed + 2)

    for epoch in range(sched.s0):
        l_seg = _seg_epoch(model, g_opt, seg_loader, steps)
        report.record('seg', epoch, {'L_seg': l_seg})
        logger.info(f"[seg] epoch {epoch}: L_seg={l_seg:.5f}")

    for epoch in range(sched.d0):
        d_losses = _disc_epoch(model, discs, d_opt, loader_a, loader_b, steps)
        report.record('disc', epoch, d_losses)
        logger.info(f"[disc] epoch {epoch}: " + ", ".join(f"{k}={v:.5f}" for k, v in d_losses.items()))

    for epoch in range(sched.alt_epochs):
        d_losses = _disc_epoch(model, discs, d_opt, loader_a, loader_b, steps)
        report.record('alt-disc', epoch, d_losses)
        g_losses = _gen_epoch(model, discs, g_opt, loader_a, loader_b, steps, w, train_cfg.dm_adv_form)
        report.record('alt-gen', epoch, g_losses)
        logger.info(f"[alt] epoch {epoch}: " + ", ".join(f"{k}={v:.5f}" for k, v in {**d_losses, **g_losses}.items()))

    return report
