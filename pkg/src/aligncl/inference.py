"""Early-exit prediction, layer-score curves and flops accounting."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import EncodedData
from .model import MultiExitModel, count_flops
from .tensor import Tensor, no_grad

EVAL_BATCH = 256


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def entropy(probs: np.ndarray) -> np.ndarray:
    """Natural-log entropy of each row."""
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(probs > 0, probs * np.log(probs), 0.0)
    return -terms.sum(axis=-1)


@dataclass
class Predictions:
    logits: np.ndarray
    probabilities: np.ndarray
    exit_layer: np.ndarray

    @property
    def predicted(self) -> np.ndarray:
        return self.logits.argmax(axis=-1)


@dataclass
class ExitPolicy:
    kind: str = "fixed_layer"
    layer: int | None = None
    threshold: float | None = None
    patience: int | None = None

    @classmethod
    def parse(cls, text: str) -> "ExitPolicy":
        """``fixed:<m>``, ``entropy:<threshold>`` or ``patience:<t>``."""
        kind, _, arg = text.partition(":")
        if kind in ("fixed", "fixed_layer"):
            return cls("fixed_layer", layer=int(arg))
        if kind == "entropy":
            return cls("entropy", threshold=float(arg))
        if kind == "patience":
            return cls("patience", patience=int(arg))
        raise ValueError(f"unknown exit policy {text!r}")


@dataclass
class ExitTrace:
    exit_layer: np.ndarray
    predicted: np.ndarray
    entropies: np.ndarray
    labels: np.ndarray | None
    flops_ratio: float

    @property
    def correct(self) -> np.ndarray | None:
        return None if self.labels is None else self.predicted == self.labels

    @property
    def accuracy(self) -> float | None:
        return None if self.labels is None else float(self.correct.mean())

    @property
    def average_exit_layer(self) -> float:
        return float(self.exit_layer.mean())

    def summary(self) -> dict:
        return {"n_samples": int(self.exit_layer.size), "accuracy": self.accuracy,
                "average_exit_layer": self.average_exit_layer, "flops_ratio": self.flops_ratio}

    def records(self) -> list[dict]:
        rows = []
        for i, m in enumerate(self.exit_layer):
            rows.append({
                "sample_id": i,
                "exit_layer": int(m),
                "predicted": int(self.predicted[i]),
                "correct": None if self.labels is None else bool(self.predicted[i] == self.labels[i]),
                "entropy_at_exit": float(self.entropies[i, m - 1]),
            })
        return rows

    def write_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.records():
                fh.write(json.dumps(r, sort_keys=True) + "\n")


def _chunks(n: int, size: int = EVAL_BATCH):
    for s in range(0, n, size):
        yield np.arange(s, min(n, s + size))


def exit_logits(model: MultiExitModel, ids, m: int) -> tuple[np.ndarray, np.ndarray]:
    """(representations, logits) of exit ``m``; blocks past ``m`` are not run."""
    with no_grad():
        hidden = model.encode(ids, train=False, upto=m)
        rep, logits = model.exit_forward(m, hidden[m - 1], ids, train=False)
    return rep.data, logits.data


def predict_fixed(model: MultiExitModel, ids, m: int) -> Predictions:
    if not 1 <= m <= model.n_layers:
        raise ValueError(f"exit layer {m} outside 1..{model.n_layers}")
    _, logits = exit_logits(model, ids, m)
    return Predictions(logits, _softmax(logits), np.full(len(logits), m))


def all_exit_logits(model: MultiExitModel, ids) -> list[np.ndarray]:
    """Logits of every exit from one full forward pass."""
    with no_grad():
        out = model.forward(ids, train=False)
    return [out[m][1].data for m in range(1, model.n_layers + 1)]


def _progressive(model: MultiExitModel, ids, decide) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Run blocks one at a time on the samples still in flight.

    ``decide(m, probs, active, state)`` returns an exit mask over the active rows.
    """
    ids = model.check_ids(ids)
    n, M = ids.shape[0], model.n_layers
    exit_at = np.full(n, M)
    pred = np.zeros(n, dtype=np.int64)
    ents = np.full((n, M), np.nan)
    active = np.arange(n)
    state: dict = {}

    with no_grad():
        x = model.embed(ids)
        for m in range(1, M + 1):
            sub_ids = ids[active]
            x = model.block(m, x, sub_ids)
            _, logits = model.exit_forward(m, x, sub_ids)
            probs = _softmax(logits.data)
            ents[active, m - 1] = entropy(probs)
            done = decide(m, probs, active, state) if m < M else np.ones(active.size, dtype=bool)
            pred[active[done]] = probs[done].argmax(axis=-1)
            exit_at[active[done]] = m
            keep = ~done
            active = active[keep]
            if active.size == 0:
                break
            x = Tensor(x.data[keep])
    return exit_at, pred, ents


def _flops_ratio(model: MultiExitModel, exit_at: np.ndarray, seq_len: int) -> float:
    full = count_flops(model.config, model.n_layers, seq_len)
    per = np.array([count_flops(model.config, int(m), seq_len) for m in exit_at], dtype=np.float64)
    return float(per.mean() / full)


def predict_entropy(model: MultiExitModel, ids, threshold: float, labels=None) -> ExitTrace:
    """Exit at the first layer whose prediction entropy is below ``threshold``."""
    if not threshold > 0:
        raise ValueError("entropy threshold must be positive")

    def decide(m, probs, active, state):
        return entropy(probs) < threshold

    exit_at, pred, ents = _progressive(model, ids, decide)
    return ExitTrace(exit_at, pred, ents, None if labels is None else np.asarray(labels),
                     _flops_ratio(model, exit_at, np.asarray(ids).shape[1]))


def predict_patience(model: MultiExitModel, ids, t: int, labels=None) -> ExitTrace:
    """Exit once ``t`` consecutive exits agree on the argmax class (ties to the lower index)."""
    if not 1 <= t <= model.n_layers:
        raise ValueError(f"patience {t} outside 1..{model.n_layers}")
    n = np.asarray(ids).shape[0]
    last = np.full(n, -1)
    run = np.zeros(n, dtype=np.int64)

    def decide(m, probs, active, state):
        cls = probs.argmax(axis=-1)
        same = cls == last[active]
        run[active] = np.where(same, run[active] + 1, 1)
        last[active] = cls
        return run[active] >= t

    exit_at, pred, ents = _progressive(model, ids, decide)
    return ExitTrace(exit_at, pred, ents, None if labels is None else np.asarray(labels),
                     _flops_ratio(model, exit_at, np.asarray(ids).shape[1]))


def run_policy(model: MultiExitModel, data: EncodedData, policy: ExitPolicy) -> ExitTrace:
    """Apply ``policy`` over ``data`` in chunks and merge the traces."""
    parts = []
    for idx in _chunks(len(data)):
        ids, labels = data.pad(idx), data.labels[idx]
        if policy.kind == "fixed_layer":
            m = policy.layer if policy.layer is not None else model.n_layers
            p = predict_fixed(model, ids, m)
            probs_all = np.full((idx.size, model.n_layers), np.nan)
            probs_all[:, m - 1] = entropy(p.probabilities)
            ratio = count_flops(model.config, m, ids.shape[1]) / count_flops(
                model.config, model.n_layers, ids.shape[1])
            parts.append((ExitTrace(p.exit_layer, p.predicted, probs_all, labels, ratio), idx.size))
        elif policy.kind == "entropy":
            parts.append((predict_entropy(model, ids, policy.threshold, labels), idx.size))
        elif policy.kind == "patience":
            parts.append((predict_patience(model, ids, policy.patience, labels), idx.size))
        else:
            raise ValueError(f"unknown policy kind {policy.kind!r}")
    traces = [p for p, _ in parts]
    weights = np.array([w for _, w in parts], dtype=np.float64)
    return ExitTrace(
        np.concatenate([t.exit_layer for t in traces]),
        np.concatenate([t.predicted for t in traces]),
        np.concatenate([t.entropies for t in traces]),
        data.labels.copy(),
        float(np.dot([t.flops_ratio for t in traces], weights) / weights.sum()),
    )


def exit_accuracies(model: MultiExitModel, data: EncodedData, exits=None) -> dict[int, float]:
    """Eval-mode accuracy of each requested exit over ``data``."""
    exits = list(range(1, model.n_layers + 1)) if exits is None else list(exits)
    correct = {m: 0 for m in exits}
    for idx in _chunks(len(data)):
        ids = data.pad(idx)
        with no_grad():
            out = model.forward(ids, exits=exits, train=False)
        for m in exits:
            correct[m] += int((out[m][1].data.argmax(axis=-1) == data.labels[idx]).sum())
    return {m: correct[m] / len(data) for m in exits}


def layer_score_curve(model: MultiExitModel, data: EncodedData) -> list[tuple[int, float]]:
    """Fixed-exit accuracy for every depth."""
    acc = exit_accuracies(model, data)
    return [(m, acc[m]) for m in sorted(acc)]


def write_curve(curve: list[tuple[int, float]], n_samples: int, csv_path, json_path=None) -> None:
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["exit_layer", "score", "n_samples"])
        for m, s in curve:
            w.writerow([m, repr(float(s)), n_samples])
    if json_path is not None:
        Path(json_path).write_text(json.dumps(
            {"x": [m for m, _ in curve], "y": [s for _, s in curve],
             "xlabel": "exit layer", "ylabel": "accuracy"}, indent=2) + "\n", encoding="utf-8")


def export_representations(model: MultiExitModel, data: EncodedData, m: int) -> dict:
    """Exit-``m`` representations, the class embeddings, and a shared 2-D PCA projection."""
    from sklearn.decomposition import PCA

    reps = []
    for idx in _chunks(len(data)):
        r, _ = exit_logits(model, data.pad(idx), m)
        reps.append(r)
    reps = np.concatenate(reps)
    labels_emb = model.label_embeddings(m)
    unit = lambda a: a / np.linalg.norm(a, axis=1, keepdims=True)  # noqa: E731
    stacked = np.concatenate([unit(reps), unit(labels_emb)])
    proj = PCA(n_components=2, random_state=0).fit_transform(stacked)
    return {"reps": reps, "labels": data.labels.copy(), "label_embeddings": labels_emb,
            "pca_reps": proj[:len(reps)], "pca_label_embeddings": proj[len(reps):]}
