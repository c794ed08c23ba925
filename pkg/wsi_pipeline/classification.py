"""
Stage-1 WSI-level triage and Stage-2 key-patch selection.

Both stages work against the `PatchScorer` contract: anything with a
`model_id` and a `score(pixels) -> float` returning the malignancy
probability of one patch.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Protocol, Sequence, runtime_checkable
import copy
import logging
import math

import numpy as np

from .exceptions import EmptyInput, InvalidConfig, NoPatches, RaggedInput, ScoreOutOfRange
from .tiling import PatchRecord

logger = logging.getLogger(__name__)


@runtime_checkable
class PatchScorer(Protocol):
    model_id: str

    def score(self, pixels: np.ndarray) -> float:
        ...


class PreLabel(str, Enum):
    POSITIVE = 'positive'
    NEGATIVE = 'negative'


@dataclass(frozen=True, eq=False)
class PatchScore:
    patch: PatchRecord
    p: float

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ScoreOutOfRange(f"patch score {self.p} outside [0, 1]")


@dataclass(frozen=True)
class WsiDecision:
    pre_label: PreLabel
    score: float
    n_positive_patches: int
    n_negative_patches: int

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ScoreOutOfRange(f"WSI score {self.score} outside [0, 1]")
        if self.n_positive_patches + self.n_negative_patches < 1 and not self.is_empty_negative:
            raise NoPatches("a WSI decision needs at least one scored patch")

    @property
    def is_empty_negative(self):
        return (self.pre_label == PreLabel.NEGATIVE and self.score == 0.0
                and self.n_positive_patches == 0 and self.n_negative_patches == 0)

    @classmethod
    def no_tissue(cls):
        """Decision for a slide with no RoI-surviving patch."""
        return cls(PreLabel.NEGATIVE, 0.0, 0, 0)


@dataclass(frozen=True)
class Stage1Config:
    tau: float = 0.1
    T: float = 0.1

    def __post_init__(self):
        if not 0 < self.tau < 1:
            raise InvalidConfig(f"tau must be in (0, 1), got {self.tau}")
        if not 0 < self.T <= 1:
            raise InvalidConfig(f"T must be in (0, 1], got {self.T}")


def partition_scores(scores: Sequence[PatchScore], tau: float):
    if not scores:
        raise EmptyInput("cannot partition an empty score list")
    s_p = [s for s in scores if s.p >= tau]
    s_n = [s for s in scores if s.p < tau]
    return s_p, s_n


def pre_predict(n_pos: int, n_neg: int, T: float) -> PreLabel:
    total = n_pos + n_neg
    if total < 1:
        raise NoPatches("pre-prediction needs at least one patch")
    return PreLabel.POSITIVE if n_pos / total >= T else PreLabel.NEGATIVE


def _mean(values):
    # fsum keeps the mean independent of patch order
    return math.fsum(values) / len(values)


def wsi_score(scores: Sequence[PatchScore], cfg: Stage1Config) -> WsiDecision:
    if not scores:
        raise NoPatches("no patch scores to classify the slide with")
    s_p, s_n = partition_scores(scores, cfg.tau)
    label = pre_predict(len(s_p), len(s_n), cfg.T)
    averaged = s_p if label == PreLabel.POSITIVE else s_n
    return WsiDecision(
        pre_label=label,
        score=_mean([s.p for s in averaged]),
        n_positive_patches=len(s_p),
        n_negative_patches=len(s_n),
    )


def ensemble_average(per_model_scores: Sequence[Sequence[PatchScore]]) -> list:
    if not per_model_scores:
        raise RaggedInput("ensemble needs at least one model")
    reference = [s.patch.key for s in per_model_scores[0]]
    for model_scores in per_model_scores[1:]:
        if [s.patch.key for s in model_scores] != reference:
            raise RaggedInput("models scored different patch lists")
    return [
        PatchScore(patch=column[0].patch, p=_mean([s.p for s in column]))
        for column in zip(*per_model_scores)
    ]


def select_key_patches(ensembled: Sequence[PatchScore], key_threshold: float) -> list:
    return [s.patch for s in ensembled if s.p >= key_threshold]


def _score_shard(scorer, patches):
    batch_scorer = getattr(scorer, 'score_batch', None)
    if batch_scorer is not None:
        probabilities = batch_scorer([p.pixels for p in patches])
    else:
        probabilities = [scorer.score(p.pixels) for p in patches]
    return [PatchScore(patch=patch, p=float(p)) for patch, p in zip(patches, probabilities)]


def score_patches(scorer: PatchScorer, patches: Sequence[PatchRecord], workers: int = 1) -> list:
    """
    Score patches in grid order. With several workers the patches are split
    into contiguous shards, each scored by its own deep-copied scorer replica.
    """
    patches = list(patches)
    if workers <= 1 or len(patches) < 2:
        return _score_shard(scorer, patches)
    shards = [list(shard) for shard in np.array_split(np.arange(len(patches)), workers) if len(shard)]
    replicas = [copy.deepcopy(scorer) for _ in shards]
    with ThreadPoolExecutor(max_workers=len(shards)) as pool:
        results = pool.map(
            lambda job: _score_shard(job[0], [patches[i] for i in job[1]]),
            zip(replicas, shards),
        )
    return [score for shard_scores in results for score in shard_scores]
