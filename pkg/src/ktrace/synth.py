"""Ground-truth synthetic dataset generator.

Correctness is sampled from sigmoid(ability - difficulty), learner
interaction counts follow a truncated power law, and timestamp gaps are
log-uniform between one minute and two weeks so every time window sees
traffic.  The same KT1 file format that ingest consumes can be emitted.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import UsageError
from .ingest import LabeledInteraction
from .prep import Dataset

_ANSWERS = "abcd"
_EPOCH0_MS = 1_500_000_000_000  # mid-2017, matches real log magnitudes


@dataclass(frozen=True)
class SynthConfig:
    n_learners: int = 100
    n_items: int = 100
    n_skills: int = 20
    two_kc_prob: float = 0.5  # P(item gets a second skill); mean KCs ~ 1.5
    powerlaw_alpha: float = 2.0
    min_interactions: int = 10
    max_interactions: int = 5000
    difficulty_sd: float = 1.0
    ability_sd: float = 1.0
    learning_increment: float = 0.0  # added to ability per prior interaction
    seed: int = 0

    def __post_init__(self):
        if self.n_learners <= 0 or self.n_items <= 0 or self.n_skills <= 0:
            raise UsageError("n_learners, n_items, n_skills must be positive")
        if self.powerlaw_alpha <= 1.0:
            raise UsageError("powerlaw_alpha must exceed 1")
        if self.min_interactions < 1:
            raise UsageError("min_interactions must be >= 1")

    def to_jsonable(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_jsonable(cls, payload: dict) -> "SynthConfig":
        return cls(**payload)


@dataclass
class GroundTruth:
    difficulties: dict[str, float]
    abilities: dict[str, float]
    item_tags: dict[str, tuple[int, ...]]
    item_answers: dict[str, str]
    config: SynthConfig

    def to_json(self) -> str:
        payload = {
            "config": self.config.to_jsonable(),
            "difficulties": self.difficulties,
            "abilities": self.abilities,
            "item_tags": {q: list(t) for q, t in self.item_tags.items()},
            "item_answers": self.item_answers,
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def _powerlaw_counts(rng, config: SynthConfig, n: int) -> np.ndarray:
    """Truncated Pareto sample, minimum min_interactions."""
    u = rng.random(n)
    x = config.min_interactions * (1.0 - u) ** (-1.0 / (config.powerlaw_alpha - 1.0))
    return np.minimum(x, config.max_interactions).astype(np.int64)


def generate(config: SynthConfig) -> tuple[Dataset, GroundTruth]:
    """Deterministic per seed; per-learner generation uses spawned seeds."""
    ss = np.random.SeedSequence(config.seed)
    global_seed, learner_root = ss.spawn(2)
    rng = np.random.default_rng(global_seed)

    qids = [f"q{i}" for i in range(config.n_items)]
    difficulties = rng.normal(0.0, config.difficulty_sd, config.n_items)
    answers = [_ANSWERS[i] for i in rng.integers(0, 4, config.n_items)]
    first_skill = rng.integers(0, config.n_skills, config.n_items)
    second = rng.integers(0, config.n_skills, config.n_items)
    has_second = rng.random(config.n_items) < config.two_kc_prob
    item_tags = []
    for i in range(config.n_items):
        tags = {int(first_skill[i])}
        if has_second[i]:
            tags.add(int(second[i]))
        item_tags.append(frozenset(tags))

    counts = _powerlaw_counts(rng, config, config.n_learners)
    abilities = rng.normal(0.0, config.ability_sd, config.n_learners)

    lid_width = len(str(config.n_learners - 1))
    learner_seeds = learner_root.spawn(config.n_learners)
    learners: dict[str, list[LabeledInteraction]] = {}
    ability_map: dict[str, float] = {}
    gap_lo = math.log(60_000.0)  # 1 minute
    gap_hi = math.log(14 * 86_400_000.0)  # 2 weeks

    for li in range(config.n_learners):
        lrng = np.random.default_rng(learner_seeds[li])
        lid = f"s{li:0{lid_width}d}"
        T = int(counts[li])
        items = lrng.integers(0, config.n_items, T)
        gaps = np.exp(lrng.uniform(gap_lo, gap_hi, T)).astype(np.int64)
        ts = _EPOCH0_MS + int(lrng.integers(0, 30 * 86_400_000)) + np.cumsum(gaps)
        skill = abilities[li] + config.learning_increment * np.arange(T)
        p_correct = expit(skill - difficulties[items])
        correct = lrng.random(T) < p_correct
        wrong_pick = lrng.integers(1, 4, T)  # offset from the correct choice
        elapsed = lrng.integers(1_000, 120_000, T)
        inter = []
        for t in range(T):
            qi = int(items[t])
            qid = qids[qi]
            if correct[t]:
                answer = answers[qi]
            else:
                answer = _ANSWERS[(_ANSWERS.index(answers[qi]) + int(wrong_pick[t])) % 4]
            inter.append(
                LabeledInteraction(
                    learner_id=lid,
                    timestamp_ms=int(ts[t]),
                    question_id=qid,
                    bundle_id=None,
                    user_answer=answer,
                    elapsed_time_ms=int(elapsed[t]),
                    correct=bool(correct[t]),
                    kc_tags=item_tags[qi],
                )
            )
        learners[lid] = inter
        ability_map[lid] = float(abilities[li])

    dataset = Dataset.from_learners(learners)
    truth = GroundTruth(
        difficulties={qids[i]: float(difficulties[i]) for i in range(config.n_items)},
        abilities=ability_map,
        item_tags={qids[i]: tuple(sorted(item_tags[i])) for i in range(config.n_items)},
        item_answers={qids[i]: answers[i] for i in range(config.n_items)},
        config=config,
    )
    return dataset, truth


def write_kt1(dataset: Dataset, truth: GroundTruth, out_dir, consolidated: bool = True) -> None:
    """Emit the KT1 file format ingest consumes, plus questions + truth."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def interaction_row(it: LabeledInteraction):
        return [it.timestamp_ms, it.question_id, it.bundle_id or "",
                it.user_answer, it.elapsed_time_ms]

    if consolidated:
        with open(out_dir / "interactions.csv", "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["learner_id", "timestamp", "question_id", "bundle_id",
                 "user_answer", "elapsed_time"]
            )
            for lid in dataset.learner_ids():
                for it in dataset.learners[lid]:
                    writer.writerow([lid] + interaction_row(it))
    else:
        for lid in dataset.learner_ids():
            with open(out_dir / f"u{lid}.csv", "w", encoding="utf-8", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(
                    ["timestamp", "question_id", "bundle_id", "user_answer",
                     "elapsed_time"]
                )
                for it in dataset.learners[lid]:
                    writer.writerow(interaction_row(it))

    with open(out_dir / "questions.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["question_id", "correct_answer", "tags"])
        for qid in sorted(truth.item_answers, key=lambda q: int(q[1:])):
            tags = ";".join(str(t) for t in truth.item_tags[qid])
            writer.writerow([qid, truth.item_answers[qid], tags or "-1"])

    with open(out_dir / "ground_truth.json", "w", encoding="utf-8") as fh:
        fh.write(truth.to_json())
