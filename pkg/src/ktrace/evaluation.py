"""AUC computation and the split-validation experiment harness."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import DataError, UsageError
from . import features as ft
from . import linear_models as lm
from . import seq_models as sm
from .prep import Dataset, learner_split


def compute_auc(labels: Sequence, scores: Sequence) -> float:
    """Mann-Whitney AUC with average ranks for ties, O(n log n)."""
    y = np.asarray(labels, dtype=bool)
    s = np.asarray(scores, dtype=np.float64)
    if y.shape != s.shape:
        raise UsageError("labels and scores must have equal length")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUC undefined: only one class present")
    ranks = rankdata(s, method="average")
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def accuracy_at(labels, scores, threshold: float = 0.5) -> float:
    y = np.asarray(labels, dtype=bool)
    s = np.asarray(scores, dtype=np.float64)
    return float(np.mean((s >= threshold) == y))


@dataclass
class EvalReport:
    model: str
    feature_family: str
    auc: float
    accuracy: float
    n_test_interactions: int
    n_test_learners: int
    seed: int
    config_hash: str

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))


def config_hash(payload: dict) -> str:
    canonical = json.dumps(payload, sort_keys=True, default=str)
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def score_baseline(model: lm.BaselineModel, test: Dataset):
    labels, scores = [], []
    for it in test.all_interactions():
        labels.append(it.correct)
        scores.append(model.predict(it.question_id))
    return np.array(labels, dtype=bool), np.array(scores)


def score_sequence_model(model, samples: Sequence[sm.SequenceSample]):
    labels_parts, score_parts = [], []
    for sample in samples:
        probs, targets = model.predict(sample)
        score_parts.append(probs)
        labels_parts.append(targets)
    return (
        np.concatenate(labels_parts).astype(bool),
        np.concatenate(score_parts),
    )


def run_experiment(
    dataset: Dataset,
    model: str = "lr",
    feature_config: ft.FeatureConfig | None = None,
    test_fraction: float = 0.2,
    seed: int = 0,
    l2: float = 1.0,
    max_iter: int = 100,
    train_config: sm.TrainConfig | None = None,
    hidden: int = 32,
    max_len: int | None = None,
) -> EvalReport:
    """Split -> featurize (train vocabularies only) -> fit -> score test.

    Fully reproducible from (dataset, configs, seed).
    """
    train, test = learner_split(dataset, test_fraction, seed)
    chash = config_hash(
        {
            "model": model,
            "features": feature_config.to_jsonable() if feature_config else None,
            "test_fraction": test_fraction,
            "seed": seed,
            "l2": l2,
            "train": None if train_config is None else train_config.__dict__,
        }
    )
    family = feature_config.family if feature_config else "original"

    if model == "baseline":
        fitted = lm.fit_baseline(train.learners)
        labels, scores = score_baseline(fitted, test)
        family = "item_correctness"
    elif model == "lr":
        if feature_config is None:
            raise UsageError("lr requires a feature configuration")
        layout = ft.layout_for(train, feature_config)
        train_m = ft.extract(train.learners, layout)
        fitted = lm.fit_logistic_matrix(train_m, l2=l2, max_iter=max_iter)
        test_m = ft.extract(test.learners, layout)
        labels = test_m.y
        scores = fitted.predict_matrix(test_m.X)
    elif model in ("dkt", "sakt"):
        cfg = train_config or sm.TrainConfig(seed=seed)
        train_samples, n_tags = sm.build_sequence_samples(train)
        test_samples, _ = sm.build_sequence_samples(test, train.combined_kc_vocab)
        if model == "dkt":
            net = sm.DKTModel(n_tags, hidden=hidden, seed=cfg.seed)
        else:
            from .prep import median_sequence_length

            L = max_len if max_len is not None else max(2, median_sequence_length(train))
            net = sm.SAKTModel(n_tags, dim=hidden, max_len=L,
                               dropout=cfg.dropout, seed=cfg.seed)
        sm.train_sequence_model(net, train_samples, cfg)
        labels, scores = score_sequence_model(net, test_samples)
    else:
        raise UsageError(f"unknown model {model!r}")

    return EvalReport(
        model=model,
        feature_family=family,
        auc=compute_auc(labels, scores),
        accuracy=accuracy_at(labels, scores),
        n_test_interactions=int(len(labels)),
        n_test_learners=test.n_learners,
        seed=seed,
        config_hash=chash,
    )


def leaderboard(reports: Sequence[EvalReport]) -> str:
    """Delimited leaderboard: Feature Set | Model | AUC, best first."""
    lines = ["feature_set\tmodel\tauc"]
    for r in sorted(reports, key=lambda r: -r.auc):
        lines.append(f"{r.feature_family}\t{r.model}\t{r.auc:.4f}")
    return "\n".join(lines) + "\n"
