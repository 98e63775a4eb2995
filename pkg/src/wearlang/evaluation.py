"""Zero-shot classification, cross-modal retrieval, linear probing and caption metrics."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy.stats import rankdata

from .model import SensorTextModel, encode_sensor, encode_text, generate_ids
from .text import PromptSet, Vocabulary, encoder_ids, make_prompt_set, split_words

log = logging.getLogger(__name__)

UNAVAILABLE_CAPTION_METRICS = ("bertscore", "meteor")


# --- embedding extraction ----------------------------------------------------

@torch.no_grad()
def sensor_embeddings(model: SensorTextModel, x: torch.Tensor, batch: int = 64) -> np.ndarray:
    model.eval()
    out = [encode_sensor(model, x[i:i + batch])[1] for i in range(0, len(x), batch)]
    return torch.cat(out).double().numpy()


@torch.no_grad()
def text_embeddings(model: SensorTextModel, ids: torch.Tensor, batch: int = 256) -> np.ndarray:
    model.eval()
    out = [encode_text(model, ids[i:i + batch])[1] for i in range(0, len(ids), batch)]
    return torch.cat(out).double().numpy()


def ensemble_embedding(prompt_embs: np.ndarray) -> np.ndarray:
    """Mean of unit-norm prompt embeddings, renormalized."""
    mean = np.asarray(prompt_embs, dtype=np.float64).mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm < 1e-8:
        raise ValueError("prompt embeddings cancel out; class embedding undefined")
    return mean / norm


def class_embedding(model: SensorTextModel, vocab: Vocabulary, prompts: PromptSet) -> np.ndarray:
    ids = torch.tensor([encoder_ids(vocab, p, model.cfg.L_text) for p in prompts.prompts])
    return ensemble_embedding(text_embeddings(model, ids))


def class_embeddings(model: SensorTextModel, vocab: Vocabulary,
                     classes: Sequence[str]) -> np.ndarray:
    return np.stack([class_embedding(model, vocab, make_prompt_set(c)) for c in classes])


# --- zero-shot ---------------------------------------------------------------

def zero_shot_scores(sensor_embs: np.ndarray, class_embs: np.ndarray) -> np.ndarray:
    s = np.asarray(sensor_embs, dtype=np.float64)
    s = s / np.linalg.norm(s, axis=-1, keepdims=True)
    return s @ np.asarray(class_embs, dtype=np.float64).T


def zero_shot_predict(scores: np.ndarray, classes: Sequence[str]) -> list[str]:
    """Argmax per row; ties go to the lexicographically smallest class name."""
    scores = np.atleast_2d(scores)
    order = sorted(range(len(classes)), key=lambda k: classes[k])
    ranked = scores[:, order]
    return [classes[order[int(np.argmax(row))]] for row in ranked]


def zero_shot_classify(sensor_emb: np.ndarray, class_embs: np.ndarray,
                       classes: Sequence[str]) -> tuple[str, np.ndarray]:
    scores = zero_shot_scores(np.atleast_2d(sensor_emb), class_embs)[0]
    return zero_shot_predict(scores[None], classes)[0], scores


# --- classification metrics --------------------------------------------------

def _label_indices(labels, n_classes: int | None = None) -> np.ndarray:
    y = np.asarray(labels)
    if y.dtype.kind not in "iu":
        raise TypeError("labels must be integer class indices")
    return y


def auroc_per_class(scores: np.ndarray, labels) -> dict[int, float]:
    """One-vs-rest AUROC per class via the rank statistic (ties count half)."""
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    y = _label_indices(labels)
    out = {}
    for k in range(scores.shape[1]):
        pos = y == k
        n_pos, n_neg = int(pos.sum()), int((~pos).sum())
        if n_pos == 0 or n_neg == 0:
            warnings.warn(f"class {k} has no {'positives' if n_pos == 0 else 'negatives'}; "
                          "excluded from AUROC", stacklevel=2)
            continue
        ranks = rankdata(scores[:, k])
        out[k] = float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))
    return out


def auroc_macro_ovr(scores: np.ndarray, labels) -> float:
    per = auroc_per_class(scores, labels)
    if len(per) < 2 and np.atleast_2d(scores).shape[1] > 1:
        raise ValueError("AUROC needs at least two classes present")
    if not per:
        raise ValueError("AUROC needs both positives and negatives")
    return float(np.mean(list(per.values())))


def per_class_f1(preds, labels) -> dict[int, float]:
    p, y = np.asarray(preds), np.asarray(labels)
    out = {}
    for k in np.union1d(np.unique(p), np.unique(y)):
        tp = int(np.sum((p == k) & (y == k)))
        fp = int(np.sum((p == k) & (y != k)))
        fn = int(np.sum((p != k) & (y == k)))
        out[k.item()] = 2 * tp / (2 * tp + fp + fn)
    return out


def macro_f1(preds, labels) -> float:
    if len(preds) == 0 or len(preds) != len(labels):
        raise ValueError("preds and labels must be equal-length and nonempty")
    return float(np.mean(list(per_class_f1(preds, labels).values())))


def balanced_accuracy(preds, labels) -> float:
    if len(preds) == 0 or len(preds) != len(labels):
        raise ValueError("preds and labels must be equal-length and nonempty")
    p, y = np.asarray(preds), np.asarray(labels)
    return float(np.mean([np.mean(p[y == k] == k) for k in np.unique(y)]))


# --- retrieval ---------------------------------------------------------------

def partner_ranks(sim: np.ndarray) -> np.ndarray:
    """0-based rank of each row's diagonal entry; equal scores rank by ascending column index."""
    sim = np.asarray(sim, dtype=np.float64)
    n = sim.shape[0]
    diag = sim[np.arange(n), np.arange(n)][:, None]
    cols = np.arange(sim.shape[1])[None, :]
    ahead = (sim > diag) | ((sim == diag) & (cols < np.arange(n)[:, None]))
    return ahead.sum(axis=1)


def retrieval_recall(sensor_embs: np.ndarray, text_embs: np.ndarray, k: int
                     ) -> tuple[float, float]:
    """Recall@k in both directions with cosine scores."""
    s = np.asarray(sensor_embs, dtype=np.float64)
    v = np.asarray(text_embs, dtype=np.float64)
    if s.shape != v.shape:
        raise ValueError("sensor and text embedding sets must have equal shape")
    if k > s.shape[0] or k < 1:
        raise ValueError(f"k={k} outside [1, {s.shape[0]}]")
    sim = s @ v.T
    return (float(np.mean(partner_ranks(sim) < k)), float(np.mean(partner_ranks(sim.T) < k)))


# --- linear probe ------------------------------------------------------------

def balanced_class_weights(y: np.ndarray, n_classes: int) -> np.ndarray:
    """``n / (K * count_k)`` for each class present."""
    counts = np.bincount(y, minlength=n_classes).astype(np.float64)
    present = counts > 0
    w = np.zeros(n_classes)
    w[present] = len(y) / (present.sum() * counts[present])
    return w


@dataclass
class LinearProbe:
    """Multinomial logistic regression with balanced class weights and L2 on the weights.

    Minimizes ``mean_i w[y_i] * CE_i + l2/2 * ||W||^2`` by full-batch gradient
    descent with step ``1/L`` from the smoothness bound.
    """

    n_classes: int
    l2: float = 1e-3
    max_iter: int = 5000
    tol: float = 1e-7
    W: np.ndarray | None = None
    b: np.ndarray | None = None
    n_iter: int = 0

    def _logits(self, X):
        return X @ self.W + self.b

    def fit(self, X: np.ndarray, y) -> "LinearProbe":
        X = np.asarray(X, dtype=np.float64)
        y = _label_indices(y)
        if len(np.unique(y)) < 2:
            raise ValueError("linear probe needs at least two classes")
        n, d = X.shape
        cw = balanced_class_weights(y, self.n_classes)
        sw = cw[y]
        onehot = np.eye(self.n_classes)[y]
        Xb = np.hstack([X, np.ones((n, 1))])
        lip = 0.5 * sw.max() * np.linalg.eigvalsh(Xb.T @ Xb / n)[-1] + self.l2
        step = 1.0 / lip
        self.W = np.zeros((d, self.n_classes))
        self.b = np.zeros(self.n_classes)
        for it in range(self.max_iter):
            z = self._logits(X)
            z -= z.max(axis=1, keepdims=True)
            p = np.exp(z)
            p /= p.sum(axis=1, keepdims=True)
            r = (p - onehot) * sw[:, None] / n
            gW = X.T @ r + self.l2 * self.W
            gb = r.sum(axis=0)
            self.W -= step * gW
            self.b -= step * gb
            self.n_iter = it + 1
            if max(np.abs(gW).max(), np.abs(gb).max()) < self.tol:
                break
        return self

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        z = self._logits(np.asarray(X, dtype=np.float64))
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.argmax(self._logits(np.asarray(X, dtype=np.float64)), axis=1)

    def objective(self, X: np.ndarray, y) -> float:
        y = _label_indices(y)
        sw = balanced_class_weights(y, self.n_classes)[y]
        logp = np.log(self.predict_proba(X))[np.arange(len(y)), y]
        return float(-(sw * logp).mean() + 0.5 * self.l2 * (self.W ** 2).sum())


def classification_metrics(scores: np.ndarray, preds, labels) -> dict[str, float]:
    return {
        "auroc": auroc_macro_ovr(scores, labels),
        "macro_f1": macro_f1(preds, labels),
        "balanced_acc": balanced_accuracy(preds, labels),
    }


def linear_probe(train_X, train_y, test_X, test_y, n_classes: int, l2: float = 1e-3,
                 max_iter: int = 5000) -> tuple[LinearProbe, dict[str, float]]:
    probe = LinearProbe(n_classes, l2=l2, max_iter=max_iter).fit(train_X, train_y)
    proba = probe.predict_proba(test_X)
    return probe, classification_metrics(proba, probe.predict(test_X), test_y)


def sample_per_class(y: np.ndarray, n: int, seed: int) -> np.ndarray:
    """Up to ``n`` indices per class (all of a class when it has fewer), in original order."""
    rng = np.random.default_rng(seed)
    picked = []
    for k in np.unique(y):
        idx = np.flatnonzero(y == k)
        if len(idx) < n:
            log.warning("class %s has %d < %d samples; using all of them", k, len(idx), n)
            picked.append(idx)
        else:
            picked.append(rng.choice(idx, size=n, replace=False))
    return np.sort(np.concatenate(picked))


FEW_SHOT_SIZES = (5, 10, 20, 50)


def few_shot_eval(train_X, train_y, test_X, test_y, n_classes: int,
                  sizes: Sequence[int] = FEW_SHOT_SIZES, seeds: Sequence[int] = range(5),
                  l2: float = 1e-3) -> dict[int, dict[str, float]]:
    """Linear-probe AUROC mean and spread over seeds for each shots-per-class budget."""
    train_y = _label_indices(train_y)
    curve = {}
    for n in sizes:
        aucs = []
        for seed in seeds:
            idx = sample_per_class(train_y, n, seed)
            _, m = linear_probe(train_X[idx], train_y[idx], test_X, test_y, n_classes, l2)
            aucs.append(m["auroc"])
        curve[int(n)] = {"auroc_mean": float(np.mean(aucs)), "auroc_std": float(np.std(aucs)),
                         "runs": len(aucs)}
    return curve


# --- caption metrics ---------------------------------------------------------

def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def caption_metrics(hypothesis: str, reference: str) -> dict[str, float]:
    """Multiset token F1 and ROUGE-L F-measure on normalized word tokens."""
    hyp, ref = split_words(hypothesis), split_words(reference)
    if not ref:
        raise ValueError("empty reference caption")
    if not hyp:
        return {"token_f1": 0.0, "rouge_l": 0.0}
    from collections import Counter

    overlap = sum((Counter(hyp) & Counter(ref)).values())
    token_f1 = 0.0 if overlap == 0 else 2 * overlap / (len(hyp) + len(ref))
    lcs = lcs_length(hyp, ref)
    if lcs == 0:
        return {"token_f1": token_f1, "rouge_l": 0.0}
    p, r = lcs / len(hyp), lcs / len(ref)
    return {"token_f1": token_f1, "rouge_l": 2 * p * r / (p + r)}


@torch.no_grad()
def generate_texts(model: SensorTextModel, vocab: Vocabulary, x: torch.Tensor, max_len: int,
                   batch: int = 64) -> list[str]:
    model.eval()
    out = []
    for i in range(0, len(x), batch):
        tokens, _ = encode_sensor(model, x[i:i + batch])
        out += [vocab.detokenize(ids) for ids in generate_ids(model, tokens, max_len)]
    return out


# --- reports -----------------------------------------------------------------

def config_digest(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class EvalReport:
    task: str
    metrics: dict[str, float]
    per_class: list[dict] = field(default_factory=list)
    config_digest: str = ""
    notes: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        for k, v in self.metrics.items():
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"metric {k}={v} outside [0, 1]")

    def to_dict(self) -> dict:
        return {"task": self.task, "metrics": self.metrics, "per_class": self.per_class,
                "config_digest": self.config_digest, "notes": self.notes}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        lines = [f"task: {self.task}   config: {self.config_digest}"]
        lines.append(format_table(["metric", "value"],
                                  [[k, f"{v:.4f}"] for k, v in sorted(self.metrics.items())]))
        if self.per_class:
            cols = list(self.per_class[0])
            lines.append(format_table(cols, [[_cell(r[c]) for c in cols]
                                             for r in self.per_class]))
        lines += [f"note: {n}" for n in self.notes]
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        if self.per_class:
            w = csv.DictWriter(buf, fieldnames=list(self.per_class[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(self.per_class)
        return buf.getvalue()

    def write(self, stem: str | Path) -> None:
        stem = Path(stem)
        stem.with_suffix(".json").write_text(self.to_json())
        stem.with_suffix(".txt").write_text(self.to_text())
        if self.per_class:
            stem.with_suffix(".csv").write_text(self.to_csv())


def _cell(v) -> str:
    return f"{v:.4f}" if isinstance(v, float) else str(v)


def format_table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    cells = [list(map(str, header))] + [list(map(str, r)) for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    fmt = lambda r: "  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip()  # noqa: E731
    return "\n".join([fmt(cells[0]), fmt(["-" * w for w in widths])] + [fmt(r) for r in cells[1:]])
