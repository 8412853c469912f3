"""Preprocessing: filtering rules, KC vocabularies, statistics, splits, samples.

Filtering order is fixed: untagged interactions are dropped first, then
learners left with fewer than the minimum interaction count.  Medians use
the mean-of-middles convention for even counts.
"""

from __future__ import annotations

import json
import statistics
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from .errors import DataError, UsageError
from .ingest import LabeledInteraction

MIN_INTERACTIONS_DEFAULT = 10


def _median(values) -> float:
    return float(statistics.median(values))


@dataclass
class Dataset:
    """Preprocessed per-learner interaction lists plus vocabularies."""

    learners: dict[str, list[LabeledInteraction]]
    kc_vocab: list[int]
    item_vocab: list[str]
    combined_kc_vocab: dict[tuple[int, ...], int]

    @classmethod
    def from_learners(cls, learners: Mapping[str, list[LabeledInteraction]]) -> "Dataset":
        """Build vocabularies from (already filtered and sorted) learner lists."""
        skills: set[int] = set()
        items: set[str] = set()
        kc_sets: set[tuple[int, ...]] = set()
        for inter in learners.values():
            for it in inter:
                skills.update(it.kc_tags)
                items.add(it.question_id)
                kc_sets.add(tuple(sorted(it.kc_tags)))
        kc_vocab = sorted(skills)
        combined = _assign_combined_ids(kc_sets, kc_vocab)
        return cls(
            learners=dict(sorted(learners.items())),
            kc_vocab=kc_vocab,
            item_vocab=sorted(items),
            combined_kc_vocab=combined,
        )

    @property
    def n_learners(self) -> int:
        return len(self.learners)

    @property
    def n_interactions(self) -> int:
        return sum(len(v) for v in self.learners.values())

    def learner_ids(self) -> list[str]:
        return sorted(self.learners)

    def all_interactions(self) -> Iterable[LabeledInteraction]:
        for lid in self.learner_ids():
            yield from self.learners[lid]

    def subset(self, learner_ids: Iterable[str]) -> "Dataset":
        ids = list(learner_ids)
        missing = [i for i in ids if i not in self.learners]
        if missing:
            raise DataError(f"unknown learner ids in subset: {missing[:5]}")
        return Dataset.from_learners({i: self.learners[i] for i in ids})


def _assign_combined_ids(kc_sets: set[tuple[int, ...]], kc_vocab: list[int]) -> dict[tuple[int, ...], int]:
    """Dense ids over observed distinct KC sets.

    Observed singletons come first, ordered like the original skill ids, so
    a singleton's combined id is consistent with its skill's rank; larger
    sets follow in (size, lexicographic) order.
    """
    singles = [(s,) for s in kc_vocab if (s,) in kc_sets]
    multis = sorted((t for t in kc_sets if len(t) != 1), key=lambda t: (len(t), t))
    return {t: i for i, t in enumerate(singles + multis)}


def combine_kcs(kc_tags: Iterable[int], vocab: Mapping[tuple[int, ...], int]) -> int:
    """Map a KC set to its combined tag id, independent of element order."""
    key = tuple(sorted(set(kc_tags)))
    if not key:
        raise DataError("cannot combine an empty KC set")
    try:
        return vocab[key]
    except KeyError:
        raise DataError(f"KC combination {key} not in vocabulary")


def preprocess(
    learners: Mapping[str, list[LabeledInteraction]],
    min_interactions: int = MIN_INTERACTIONS_DEFAULT,
) -> Dataset:
    """Drop untagged interactions, then short learners; sort by timestamp.

    Sorting is stable so ties keep file order.
    """
    kept: dict[str, list[LabeledInteraction]] = {}
    for lid, inter in learners.items():
        tagged = [it for it in inter if it.kc_tags]
        if len(tagged) < min_interactions:
            continue
        tagged.sort(key=lambda it: it.timestamp_ms)
        kept[lid] = tagged
    if not kept:
        raise DataError("no learners survive preprocessing")
    return Dataset.from_learners(kept)


@dataclass
class DatasetStats:
    n_learners: int
    n_interactions: int
    mean_kcs_per_item: float
    median_items_per_kc: float
    median_learners_per_item: float
    median_learners_per_kc: float
    median_interactions_per_learner: float
    n_correct: int
    n_wrong: int

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n"


def compute_stats(dataset: Dataset) -> DatasetStats:
    if dataset.n_learners == 0:
        raise DataError("empty dataset")
    item_tags: dict[str, frozenset[int]] = {}
    items_per_kc: dict[int, set[str]] = {}
    learners_per_item: dict[str, set[str]] = {}
    learners_per_kc: dict[int, set[str]] = {}
    n_correct = 0
    n_total = 0
    for lid, inter in dataset.learners.items():
        for it in inter:
            n_total += 1
            n_correct += it.correct
            item_tags.setdefault(it.question_id, it.kc_tags)
            learners_per_item.setdefault(it.question_id, set()).add(lid)
            for s in it.kc_tags:
                items_per_kc.setdefault(s, set()).add(it.question_id)
                learners_per_kc.setdefault(s, set()).add(lid)
    return DatasetStats(
        n_learners=dataset.n_learners,
        n_interactions=n_total,
        mean_kcs_per_item=sum(len(t) for t in item_tags.values()) / len(item_tags),
        median_items_per_kc=_median([len(v) for v in items_per_kc.values()]),
        median_learners_per_item=_median([len(v) for v in learners_per_item.values()]),
        median_learners_per_kc=_median([len(v) for v in learners_per_kc.values()]),
        median_interactions_per_learner=_median(
            [len(v) for v in dataset.learners.values()]
        ),
        n_correct=n_correct,
        n_wrong=n_total - n_correct,
    )


def powerlaw_histogram(dataset: Dataset) -> list[tuple[int, int]]:
    """Histogram of interactions-per-learner, sorted by interaction count."""
    counts = Counter(len(v) for v in dataset.learners.values())
    return sorted(counts.items())


def write_histogram(path, histogram: list[tuple[int, int]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("interaction_count,n_learners\n")
        for count, n in histogram:
            fh.write(f"{count},{n}\n")


def learner_split(dataset: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Disjoint learner-level split, deterministic per seed."""
    if not (0.0 < test_fraction < 1.0):
        raise UsageError(f"test_fraction must be in (0, 1), got {test_fraction}")
    ids = dataset.learner_ids()
    if len(ids) < 2:
        raise DataError("need at least 2 learners to split")
    n_test = round(test_fraction * len(ids))
    n_test = min(max(n_test, 1), len(ids) - 1)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(ids))
    test_ids = {ids[i] for i in perm[:n_test]}
    train = dataset.subset([i for i in ids if i not in test_ids])
    test = dataset.subset([i for i in ids if i in test_ids])
    return train, test


def sample_learners(dataset: Dataset, n: int, seed: int) -> Dataset:
    """Uniform learner subsample without replacement, deterministic per seed."""
    ids = dataset.learner_ids()
    if n <= 0:
        raise UsageError(f"sample size must be positive, got {n}")
    if n > len(ids):
        raise DataError(f"cannot sample {n} of {len(ids)} learners")
    if n == len(ids):
        return dataset.subset(ids)
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(ids), size=n, replace=False)
    return dataset.subset([ids[i] for i in sorted(chosen)])


def correctness_ratio(dataset: Dataset) -> float:
    total = dataset.n_interactions
    if total == 0:
        raise DataError("empty dataset")
    correct = sum(it.correct for it in dataset.all_interactions())
    return correct / total


def median_sequence_length(dataset: Dataset) -> int:
    """Median interactions per learner, truncated to an integer."""
    return int(_median([len(v) for v in dataset.learners.values()]))


def vocab_to_json(dataset: Dataset) -> str:
    payload = {
        "kc_vocab": dataset.kc_vocab,
        "item_vocab": dataset.item_vocab,
        "combined_kc_vocab": [
            {"tags": list(tags), "id": cid}
            for tags, cid in sorted(dataset.combined_kc_vocab.items(), key=lambda kv: kv[1])
        ],
    }
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"
