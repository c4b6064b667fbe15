"""Fold partitioning and episodic support/query sampling."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .dataset import DatasetManifest


class EpisodeError(ValueError):
    pass


@dataclass(frozen=True)
class FoldSpec:
    """Round-robin class->fold assignment over ascending class ids."""

    classes: tuple[int, ...]
    fold_index: int = 0
    fold_count: int = 4
    assignment: dict = field(init=False, compare=False, repr=False)

    def __post_init__(self):
        classes = tuple(sorted(set(int(c) for c in self.classes)))
        object.__setattr__(self, "classes", classes)
        if self.fold_count < 2:
            raise EpisodeError(f"fold_count must be >= 2, got {self.fold_count}")
        if len(classes) < self.fold_count:
            raise EpisodeError(f"{len(classes)} classes cannot fill {self.fold_count} folds")
        if not 0 <= self.fold_index < self.fold_count:
            raise EpisodeError(f"fold_index {self.fold_index} out of range for {self.fold_count} folds")
        object.__setattr__(self, "assignment", {c: i % self.fold_count for i, c in enumerate(classes)})

    def fold_classes(self, fold: int) -> tuple[int, ...]:
        return tuple(c for c in self.classes if self.assignment[c] == fold)

    @property
    def test_classes(self) -> tuple[int, ...]:
        return self.fold_classes(self.fold_index)

    @property
    def train_classes(self) -> tuple[int, ...]:
        return tuple(c for c in self.classes if self.assignment[c] != self.fold_index)

    def split_classes(self, split: str) -> tuple[int, ...]:
        if split == "train":
            return self.train_classes
        if split == "test":
            return self.test_classes
        raise EpisodeError(f"unknown split {split!r}; expected 'train' or 'test'")


@dataclass
class Episode:
    support_images: np.ndarray  # (K, 3, H, W) float32 in [0, 1]
    support_masks: np.ndarray  # (K, H, W) uint8 in {0, 1}
    query_image: np.ndarray  # (3, H, W)
    query_mask: np.ndarray  # (H, W)
    class_id: int
    support_indices: tuple[int, ...] = ()
    query_index: int = -1

    @property
    def K(self) -> int:
        return self.support_images.shape[0]


def episode_from_indices(manifest: DatasetManifest, support: Sequence[int], query: int) -> Episode:
    ids = {manifest.samples[i].class_id for i in (*support, query)}
    if len(ids) != 1:
        raise EpisodeError(f"episode mixes classes {sorted(ids)}")
    if query in support or len(set(support)) != len(support):
        raise EpisodeError("support and query entries must be distinct")
    return Episode(
        support_images=np.stack([manifest.image(i) for i in support]),
        support_masks=np.stack([manifest.mask(i) for i in support]),
        query_image=manifest.image(query),
        query_mask=manifest.mask(query),
        class_id=ids.pop(),
        support_indices=tuple(int(i) for i in support),
        query_index=int(query),
    )


def sample_episode(
    manifest: DatasetManifest, foldspec: FoldSpec, split: str, K: int, rng: np.random.Generator
) -> Episode:
    """Uniform class from the split, then K+1 distinct samples of it (last one is the query)."""
    if K < 1:
        raise EpisodeError(f"K must be >= 1, got {K}")
    pool = foldspec.split_classes(split)
    if not pool:
        raise EpisodeError(f"split {split!r} of fold {foldspec.fold_index} has no classes")
    cls = pool[int(rng.integers(len(pool)))]
    members = manifest.indices_of_class(cls)
    if len(members) < K + 1:
        raise EpisodeError(f"class {cls} has {len(members)} samples, need {K + 1} for a {K}-shot episode")
    picks = rng.choice(len(members), size=K + 1, replace=False)
    chosen = [members[int(i)] for i in picks]
    return episode_from_indices(manifest, chosen[:K], chosen[K])


def episode_stream(
    manifest: DatasetManifest, foldspec: FoldSpec, split: str, K: int, seed: int
) -> Iterator[Episode]:
    rng = np.random.default_rng(seed)
    while True:
        yield sample_episode(manifest, foldspec, split, K, rng)


def stack_episodes(episodes: Sequence[Episode]) -> dict[str, np.ndarray]:
    """Batch arrays for :meth:`MetaLearner.forward`."""
    return {
        "query_images": np.stack([e.query_image for e in episodes]),
        "support_images": np.stack([e.support_images for e in episodes]),
        "support_masks": np.stack([e.support_masks for e in episodes]),
        "query_masks": np.stack([e.query_mask for e in episodes]),
    }
