"""Desk-scale DKT and SAKT with exact analytic gradients, trained by Adam.

DKT is a plain tanh RNN over one-hot (tag, correctness) encodings.  SAKT
is a single causal attention layer over interaction embeddings queried by
the next exercise's embedding, followed by a position-wise feed-forward
with residual connections.  Both predict the probability of answering the
next step correctly; gradients are backpropagated by hand and verified
against finite differences in the test suite.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit

from .errors import DataError, NumericError
from .prep import Dataset


@dataclass(frozen=True)
class SequenceSample:
    """One learner's (combined KC tag, correctness) sequence."""

    tags: np.ndarray  # int64, values < vocab size
    correct: np.ndarray  # int8
    learner_id: str = ""

    def __len__(self) -> int:
        return len(self.tags)


def build_sequence_samples(
    dataset: Dataset,
    combined_vocab: Mapping[tuple[int, ...], int] | None = None,
) -> tuple[list[SequenceSample], int]:
    """Map interactions to combined-tag sequences.

    The vocabulary defaults to the dataset's own; passing a training
    vocabulary routes unseen KC combinations to a reserved id.  Returns
    (samples, vocab size including the reserved id).  Learners with fewer
    than 2 interactions are dropped (no prediction target).
    """
    vocab = combined_vocab if combined_vocab is not None else dataset.combined_kc_vocab
    reserved = len(vocab)
    samples = []
    for lid in dataset.learner_ids():
        inter = dataset.learners[lid]
        if len(inter) < 2:
            continue
        tags = np.array(
            [vocab.get(tuple(sorted(it.kc_tags)), reserved) for it in inter],
            dtype=np.int64,
        )
        correct = np.array([it.correct for it in inter], dtype=np.int8)
        samples.append(SequenceSample(tags=tags, correct=correct, learner_id=lid))
    if not samples:
        raise DataError("no usable sequences (all learners shorter than 2)")
    return samples, reserved + 1


def _uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _dropout_mask(rng, shape, p: float) -> np.ndarray:
    return (rng.random(shape) >= p) / (1.0 - p)


class DKTModel:
    """tanh RNN: h_t = tanh(Wx x_t + Wh h_{t-1} + b), y_t = sigmoid(Wy h_t + by)."""

    def __init__(self, n_tags: int, hidden: int = 32, seed: int = 0):
        self.n_tags = n_tags
        self.hidden = hidden
        rng = np.random.default_rng(seed)
        K, H = n_tags, hidden
        self.params = {
            "Wx": _uniform_init(rng, (H, 2 * K), 2 * K),
            "Wh": _uniform_init(rng, (H, H), H),
            "bh": np.zeros(H),
            "Wy": _uniform_init(rng, (K, H), H),
            "by": np.zeros(K),
        }

    def forward(self, tags: np.ndarray, correct: np.ndarray) -> np.ndarray:
        """Per-step (T-1, K) probability matrix; row t predicts step t+1."""
        p, _ = self._forward_cache(tags, correct)
        return p

    def _forward_cache(self, tags, correct):
        K, H = self.n_tags, self.hidden
        Wx, Wh, bh = self.params["Wx"], self.params["Wh"], self.params["bh"]
        Wy, by = self.params["Wy"], self.params["by"]
        T = len(tags)
        ids = tags + K * correct.astype(np.int64)
        hs = np.zeros((T - 1, H))
        h = np.zeros(H)
        for t in range(T - 1):
            h = np.tanh(Wx[:, ids[t]] + Wh @ h + bh)
            hs[t] = h
        logits = hs @ Wy.T + by
        return expit(logits), (ids, hs)

    def predict(self, sample: SequenceSample) -> tuple[np.ndarray, np.ndarray]:
        """(probability of next-step correctness, actual next-step labels)."""
        probs, _ = self._forward_cache(sample.tags, sample.correct)
        targets = sample.correct[1:].astype(np.float64)
        target_tags = sample.tags[1:]
        return probs[np.arange(len(target_tags)), target_tags], targets

    def loss_grads(self, samples: Sequence[SequenceSample], dropout: float = 0.0, rng=None):
        """Summed BCE over next-step targets plus gradients of that sum.

        Dropout (training only) is applied to the hidden state on the
        output path; the recurrent path stays undropped.
        """
        K, H = self.n_tags, self.hidden
        Wh, Wy, by = self.params["Wh"], self.params["Wy"], self.params["by"]
        grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        loss_sum = 0.0
        n_targets = 0
        for sample in samples:
            _, (ids, hs) = self._forward_cache(sample.tags, sample.correct)
            n = len(sample.tags) - 1
            if dropout > 0 and rng is not None:
                mask = _dropout_mask(rng, hs.shape, dropout)
            else:
                mask = np.ones_like(hs)
            hs_d = hs * mask
            probs = expit(hs_d @ Wy.T + by)
            tgt_tags = sample.tags[1:]
            tgt = sample.correct[1:].astype(np.float64)
            steps = np.arange(n)
            p_t = np.clip(probs[steps, tgt_tags], 1e-12, 1 - 1e-12)
            loss_sum += float(-np.sum(tgt * np.log(p_t) + (1 - tgt) * np.log(1 - p_t)))
            n_targets += n

            dlogits = np.zeros((n, K))
            dlogits[steps, tgt_tags] = probs[steps, tgt_tags] - tgt
            grads["Wy"] += dlogits.T @ hs_d
            grads["by"] += dlogits.sum(axis=0)
            dhs = (dlogits @ Wy) * mask
            dh_next = np.zeros(H)
            for t in range(n - 1, -1, -1):
                dh = dhs[t] + dh_next
                da = (1.0 - hs[t] ** 2) * dh
                grads["bh"] += da
                grads["Wx"][:, ids[t]] += da
                h_prev = hs[t - 1] if t > 0 else np.zeros(H)
                grads["Wh"] += np.outer(da, h_prev)
                dh_next = Wh.T @ da
        return loss_sum, n_targets, grads


class SAKTModel:
    """Single-layer causal self-attention knowledge-tracing model."""

    def __init__(self, n_tags: int, dim: int = 32, max_len: int = 64,
                 dropout: float = 0.25, seed: int = 0):
        self.n_tags = n_tags
        self.dim = dim
        self.max_len = max_len
        self.dropout = dropout
        rng = np.random.default_rng(seed)
        K, d, L = n_tags, dim, max_len
        self.params = {
            "M": _uniform_init(rng, (2 * K, d), d),  # interaction embeddings
            "E": _uniform_init(rng, (K, d), d),  # exercise embeddings
            "P": _uniform_init(rng, (L, d), d),  # positional embeddings
            "Wq": _uniform_init(rng, (d, d), d),
            "Wk": _uniform_init(rng, (d, d), d),
            "Wv": _uniform_init(rng, (d, d), d),
            "W1": _uniform_init(rng, (d, d), d),
            "b1": np.zeros(d),
            "W2": _uniform_init(rng, (d, d), d),
            "b2": np.zeros(d),
            "wo": _uniform_init(rng, d, d),
            "bo": np.zeros(1),
        }

    def _chunks(self, sample: SequenceSample):
        """Split sequences longer than max_len+1 into chunks sharing one step."""
        T = len(sample.tags)
        L = self.max_len
        if T <= L + 1:
            yield sample.tags, sample.correct
            return
        start = 0
        while start < T - 1:
            end = min(start + L + 1, T)
            yield sample.tags[start:end], sample.correct[start:end]
            start = end - 1

    def _forward_cache(self, tags, correct, train_mode=False, rng=None):
        p = self.params
        K, d = self.n_tags, self.dim
        n = len(tags) - 1
        int_ids = tags[:-1] + K * correct[:-1].astype(np.int64)
        q_tags = tags[1:]
        X = p["M"][int_ids] + p["P"][:n]
        Eq = p["E"][q_tags]
        Q = Eq @ p["Wq"]
        Km = X @ p["Wk"]
        V = X @ p["Wv"]
        S = (Q @ Km.T) / np.sqrt(d)
        mask = np.triu(np.ones((n, n), dtype=bool), k=1)  # query j sees keys <= j
        S = np.where(mask, -np.inf, S)
        S_shift = S - S.max(axis=1, keepdims=True)
        expS = np.exp(S_shift)
        A = expS / expS.sum(axis=1, keepdims=True)
        O = A @ V
        if train_mode and self.dropout > 0:
            m_attn = _dropout_mask(rng, O.shape, self.dropout)
        else:
            m_attn = np.ones_like(O)
        O_d = O * m_attn
        R = O_d + Q
        pre1 = R @ p["W1"] + p["b1"]
        Hff = np.maximum(pre1, 0.0)
        F = Hff @ p["W2"] + p["b2"]
        if train_mode and self.dropout > 0:
            m_ffn = _dropout_mask(rng, F.shape, self.dropout)
        else:
            m_ffn = np.ones_like(F)
        F_d = F * m_ffn
        Z = F_d + R
        logits = Z @ p["wo"] + p["bo"][0]
        probs = expit(logits)
        cache = (int_ids, q_tags, X, Eq, Q, Km, V, A, O, m_attn, R, pre1, Hff,
                 m_ffn, Z)
        return probs, cache

    def forward(self, sample: SequenceSample, train_mode: bool = False, rng=None) -> np.ndarray:
        """Probability of answering the queried exercise at each position."""
        out = []
        for tags, correct in self._chunks(sample):
            probs, _ = self._forward_cache(tags, correct, train_mode, rng)
            out.append(probs)
        return np.concatenate(out)

    def attention_weights(self, sample: SequenceSample) -> np.ndarray:
        tags, correct = next(self._chunks(sample))
        _, cache = self._forward_cache(tags, correct)
        return cache[7]

    def predict(self, sample: SequenceSample) -> tuple[np.ndarray, np.ndarray]:
        probs = self.forward(sample)
        return probs, sample.correct[1:].astype(np.float64)

    def loss_grads(self, samples: Sequence[SequenceSample], dropout: float | None = None,
                   rng=None):
        p = self.params
        d = self.dim
        drop = self.dropout if dropout is None else dropout
        train_mode = drop > 0 and rng is not None
        saved_dropout = self.dropout
        self.dropout = drop
        try:
            grads = {k: np.zeros_like(v) for k, v in p.items()}
            loss_sum = 0.0
            n_targets = 0
            for sample in samples:
                for tags, correct in self._chunks(sample):
                    probs, cache = self._forward_cache(tags, correct, train_mode, rng)
                    (int_ids, q_tags, X, Eq, Q, Km, V, A, O, m_attn, R, pre1,
                     Hff, m_ffn, Z) = cache
                    n = len(probs)
                    tgt = correct[1:].astype(np.float64)
                    pc = np.clip(probs, 1e-12, 1 - 1e-12)
                    loss_sum += float(
                        -np.sum(tgt * np.log(pc) + (1 - tgt) * np.log(1 - pc))
                    )
                    n_targets += n

                    dlogits = probs - tgt
                    grads["wo"] += Z.T @ dlogits
                    grads["bo"][0] += dlogits.sum()
                    dZ = np.outer(dlogits, p["wo"])
                    dF = dZ * m_ffn
                    dR = dZ.copy()
                    grads["W2"] += Hff.T @ dF
                    grads["b2"] += dF.sum(axis=0)
                    dpre1 = (dF @ p["W2"].T) * (pre1 > 0)
                    grads["W1"] += R.T @ dpre1
                    grads["b1"] += dpre1.sum(axis=0)
                    dR += dpre1 @ p["W1"].T
                    dO = dR * m_attn
                    dQ = dR.copy()
                    dA = dO @ V.T
                    dV = A.T @ dO
                    dS = A * (dA - np.sum(dA * A, axis=1, keepdims=True))
                    dQ += (dS @ Km) / np.sqrt(d)
                    dK = (dS.T @ Q) / np.sqrt(d)
                    dX = dK @ p["Wk"].T + dV @ p["Wv"].T
                    grads["Wk"] += X.T @ dK
                    grads["Wv"] += X.T @ dV
                    grads["Wq"] += Eq.T @ dQ
                    dEq = dQ @ p["Wq"].T
                    np.add.at(grads["M"], int_ids, dX)
                    grads["P"][: len(int_ids)] += dX
                    np.add.at(grads["E"], q_tags, dEq)
            return loss_sum, n_targets, grads
        finally:
            self.dropout = saved_dropout


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    dropout: float = 0.25
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0 or self.batch_size <= 0 or self.epochs <= 0:
            raise DataError("invalid training configuration")


def train_sequence_model(model, samples: Sequence[SequenceSample], config: TrainConfig) -> list[float]:
    """Adam training on mean next-step BCE; returns per-epoch mean loss."""
    if not samples:
        raise DataError("empty training set")
    rng = np.random.default_rng(config.seed)
    m = {k: np.zeros_like(v) for k, v in model.params.items()}
    v = {k: np.zeros_like(val) for k, val in model.params.items()}
    step = 0
    trace: list[float] = []
    for _ in range(config.epochs):
        perm = rng.permutation(len(samples))
        epoch_loss = 0.0
        epoch_n = 0
        for start in range(0, len(samples), config.batch_size):
            batch = [samples[i] for i in perm[start : start + config.batch_size]]
            loss_sum, n_t, grads = model.loss_grads(batch, dropout=config.dropout, rng=rng)
            if not np.isfinite(loss_sum):
                raise NumericError(f"non-finite loss at step {step}")
            epoch_loss += loss_sum
            epoch_n += n_t
            step += 1
            b1c = 1.0 - config.beta1**step
            b2c = 1.0 - config.beta2**step
            for k, param in model.params.items():
                g = grads[k] / n_t
                m[k] = config.beta1 * m[k] + (1 - config.beta1) * g
                v[k] = config.beta2 * v[k] + (1 - config.beta2) * g * g
                param -= config.learning_rate * (m[k] / b1c) / (
                    np.sqrt(v[k] / b2c) + config.eps
                )
        trace.append(epoch_loss / epoch_n)
    return trace


def save_checkpoint(model, path) -> None:
    """JSON tensor dump with a shape manifest."""
    meta = {"kind": type(model).__name__, "n_tags": model.n_tags}
    if isinstance(model, DKTModel):
        meta["hidden"] = model.hidden
    else:
        meta.update({"dim": model.dim, "max_len": model.max_len, "dropout": model.dropout})
    payload = {
        "meta": meta,
        "shapes": {k: list(np.shape(v)) for k, v in model.params.items()},
        "params": {k: np.asarray(v).tolist() for k, v in model.params.items()},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path):
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    meta = payload["meta"]
    if meta["kind"] == "DKTModel":
        model = DKTModel(meta["n_tags"], hidden=meta["hidden"])
    elif meta["kind"] == "SAKTModel":
        model = SAKTModel(
            meta["n_tags"], dim=meta["dim"], max_len=meta["max_len"],
            dropout=meta["dropout"],
        )
    else:
        raise DataError(f"unknown checkpoint kind {meta['kind']!r}")
    for k, val in payload["params"].items():
        arr = np.array(val, dtype=np.float64).reshape(payload["shapes"][k])
        model.params[k] = arr
    return model
