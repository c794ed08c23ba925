"""
Torch patch classifiers used by Stage-1 and the Stage-2 ensemble.

Three small architecture families are available: densely connected
(`densenet`), residual (`resnet`) and grouped residual (`resnext`). A trained
network is wrapped in `TorchPatchScorer`, which satisfies the `PatchScorer`
contract of the classification module.
"""
from dataclasses import asdict, dataclass, field
from typing import Sequence
import logging
import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.utils.data import DataLoader, Dataset

from .backbone import BasicBlock, Bottleneck, make_stage
from .exceptions import EmptyInput, InvalidConfig
from .labeling import AugmentConfig, LabeledPatch, augment_patch
from .utils import derive_seed, pixels_to_tensor, resize_images

logger = logging.getLogger(__name__)

ARCHITECTURES = ('densenet', 'resnet', 'resnext')
SCORING_BATCH = 32


@dataclass(frozen=True)
class ClassifierConfig:
    arch: str = 'densenet'
    input_size: int = 64
    width: int = 16
    epochs: int = 6
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 16
    samples: int = 400
    augment: bool = True

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise InvalidConfig(f"unknown classifier architecture {self.arch!r}; choose from {ARCHITECTURES}")
        if self.input_size < 16 or self.input_size % 8:
            raise InvalidConfig(f"classifier input_size must be a multiple of 8 and >= 16, got {self.input_size}")
        if self.width < 8 or self.width % 4:
            raise InvalidConfig(f"classifier width must be a multiple of 4 and >= 8, got {self.width}")
        if self.epochs < 0 or self.batch_size < 2 or self.samples < 2:
            raise InvalidConfig("epochs must be >= 0, batch_size and samples >= 2")
        if not self.lr > 0:
            raise InvalidConfig(f"lr must be positive, got {self.lr}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


def _head(channels):
    return nn.Sequential(
        nn.AdaptiveAvgPool2d(1),
        nn.Flatten(),
        nn.Linear(channels, 2),
    )


def _stem(width):
    return nn.Sequential(
        nn.Conv2d(3, width, 3, stride=2, padding=1, bias=False),
        nn.BatchNorm2d(width),
        nn.ReLU(inplace=True),
    )


class _DenseLayer(nn.Module):
    def __init__(self, in_channels, growth):
        super().__init__()
        self.block = nn.Sequential(
            nn.BatchNorm2d(in_channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(in_channels, growth, 3, padding=1, bias=False),
        )

    def forward(self, x):
        return torch.cat([x, self.block(x)], dim=1)


class DenseNetClassifier(nn.Module):
    """Dense blocks of concatenating layers joined by halving transitions."""

    def __init__(self, width=16, block_layers=(2, 2, 2)):
        super().__init__()
        growth = width // 2
        layers = [_stem(width)]
        channels = width
        for index, count in enumerate(block_layers):
            for _ in range(count):
                layers.append(_DenseLayer(channels, growth))
                channels += growth
            if index < len(block_layers) - 1:
                layers += [
                    nn.BatchNorm2d(channels),
                    nn.ReLU(inplace=True),
                    nn.Conv2d(channels, channels // 2, 1, bias=False),
                    nn.AvgPool2d(2),
                ]
                channels //= 2
        layers += [nn.BatchNorm2d(channels), nn.ReLU(inplace=True)]
        self.features = nn.Sequential(*layers)
        self.head = _head(channels)

    def forward(self, x):
        return self.head(self.features(x))


class ResNetClassifier(nn.Module):
    def __init__(self, width=16):
        super().__init__()
        self.features = nn.Sequential(
            _stem(width),
            make_stage(BasicBlock, width, width, 1),
            make_stage(BasicBlock, width, width * 2, 1, stride=2),
            make_stage(BasicBlock, width * 2, width * 4, 1, stride=2),
        )
        self.head = _head(width * 4)

    def forward(self, x):
        return self.head(self.features(x))


class ResNeXtClassifier(nn.Module):
    """Bottleneck stages with grouped 3x3 convolutions (cardinality 4)."""

    cardinality = 4

    def __init__(self, width=16):
        super().__init__()
        planes = (width // 2, width, width * 2)
        expansion = Bottleneck.expansion
        stages = []
        inplanes = width
        for index, p in enumerate(planes):
            stages.append(make_stage(Bottleneck, inplanes, p, 1, stride=1 if index == 0 else 2,
                                     groups=self.cardinality))
            inplanes = p * expansion
        self.features = nn.Sequential(_stem(width), *stages)
        self.head = _head(inplanes)

    def forward(self, x):
        return self.head(self.features(x))


def build_patch_classifier(cfg: ClassifierConfig) -> nn.Module:
    if cfg.arch == 'densenet':
        return DenseNetClassifier(cfg.width)
    if cfg.arch == 'resnet':
        return ResNetClassifier(cfg.width)
    return ResNeXtClassifier(cfg.width)


class TorchPatchScorer:
    """
    Malignancy probability of a patch from a two-class torch classifier.

    A single instance is not meant to be shared between threads; the
    classification module deep-copies one replica per worker.
    """

    def __init__(self, model: nn.Module, input_size: int, model_id: str):
        self.model = model.eval()
        self.input_size = input_size
        self.model_id = model_id
        self.calls = 0

    def score(self, pixels: np.ndarray) -> float:
        return self.score_batch([pixels])[0]

    @torch.no_grad()
    def score_batch(self, pixel_list: Sequence[np.ndarray]) -> list:
        self.calls += len(pixel_list)
        scores = []
        for start in range(0, len(pixel_list), SCORING_BATCH):
            batch = pixels_to_tensor(list(pixel_list[start:start + SCORING_BATCH]))
            logits = self.model(resize_images(batch, self.input_size))
            probabilities = torch.softmax(logits.double(), dim=1)[:, 1].clamp(0.0, 1.0)
            scores.extend(probabilities.tolist())
        return scores


class LabeledPatchDataset(Dataset):
    """
    Labeled patches as (image, target distribution) pairs. Augmentation is
    re-drawn every epoch from (seed, epoch, index).
    """

    def __init__(self, items: Sequence[LabeledPatch], input_size: int, seed: int,
                 augment_cfg: AugmentConfig = None):
        self.items = list(items)
        self.input_size = input_size
        self.seed = seed
        self.augment_cfg = augment_cfg
        self.epoch = 0

    def set_epoch(self, epoch):
        self.epoch = epoch

    def __len__(self):
        return len(self.items)

    def __getitem__(self, index):
        item = self.items[index]
        patch = item.patch
        if self.augment_cfg is not None:
            patch = augment_patch(patch, derive_seed(self.seed, self.epoch, index), self.augment_cfg)
        image = resize_images(pixels_to_tensor(patch.pixels).unsqueeze(0), self.input_size)[0]
        target = torch.tensor(item.target.as_tuple(), dtype=torch.float32)
        return image, target


def soft_target_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Batch mean of -sum_k t_k log p_k against smoothed targets."""
    return -(targets * F.log_softmax(logits, dim=1)).sum(dim=1).mean()


@dataclass
class ClassifierReport:
    arch: str
    epoch_losses: list = field(default_factory=list)

    def to_dict(self):
        return {'arch': self.arch, 'epoch_losses': list(self.epoch_losses)}


def train_patch_classifier(items: Sequence[LabeledPatch], cfg: ClassifierConfig, seed: int,
                           augment_cfg: AugmentConfig = AugmentConfig()):
    """
    SGD training against smoothed targets. Returns the model in eval mode and
    a per-epoch loss report.
    """
    items = list(items)
    if len(items) < 2:
        raise EmptyInput(f"need at least 2 labeled patches to train, got {len(items)}")
    if any(item.target is None for item in items):
        raise EmptyInput("every labeled patch needs a target distribution before training")

    torch.manual_seed(seed)
    model = build_patch_classifier(cfg)
    optimizer = torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum,
                                weight_decay=cfg.weight_decay)
    dataset = LabeledPatchDataset(items, cfg.input_size, seed, augment_cfg if cfg.augment else None)
    report = ClassifierReport(arch=cfg.arch)

    for epoch in range(cfg.epochs):
        dataset.set_epoch(epoch)
        loader = DataLoader(
            dataset,
            batch_size=cfg.batch_size,
            shuffle=True,
            drop_last=len(dataset) > cfg.batch_size,
            generator=torch.Generator().manual_seed(derive_seed(seed, epoch)),
        )
        model.train()
        losses = []
        for images, targets in loader:
            optimizer.zero_grad()
            loss = soft_target_loss(model(images), targets)
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
        epoch_loss = math.fsum(losses) / max(len(losses), 1)
        report.epoch_losses.append(epoch_loss)
        logger.info(f"[{cfg.arch}] epoch {epoch + 1}/{cfg.epochs} loss={epoch_loss:.4f}")

    return model.eval(), report
