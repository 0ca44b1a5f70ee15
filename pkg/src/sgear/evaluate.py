"""Metrics, late fusion, variable-horizon evaluation, prototype-ratio sweeps
and prediction-file serialization.

Ties in every top-k ranking are broken by lower class index, matching the
prototype-selection rule.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from . import semantic
from .errors import ConfigError, EvalError, FormatError

PREDICTIONS_FORMAT = "sgear-predictions"


@dataclass
class Prediction:
    clip_id: str
    scores: np.ndarray       # K class probabilities
    truth: int


def _ranked(scores):
    # stable argsort of -scores: lower class index wins ties
    return np.argsort(-np.asarray(scores), kind="stable")


def topk_accuracy(preds, k):
    """Fraction of clips whose true class is among the k best-scored."""
    if not preds:
        raise EvalError("empty prediction set")
    hits = sum(1 for p in preds if p.truth in _ranked(p.scores)[:k])
    return hits / len(preds)


def class_mean_top5_recall(preds, k=5):
    """Unweighted mean over present classes of their top-k recall."""
    if not preds:
        raise EvalError("empty prediction set")
    hits, counts = {}, {}
    for p in preds:
        counts[p.truth] = counts.get(p.truth, 0) + 1
        if p.truth in _ranked(p.scores)[:k]:
            hits[p.truth] = hits.get(p.truth, 0) + 1
    recalls = [hits.get(c, 0) / n for c, n in counts.items()]
    return float(np.mean(recalls))


# -- late fusion ---------------------------------------------------------------

ENSEMBLE_PRESETS = {
    # backbone fusion weights, in input order
    "ek100": [2.5, 1.5, 1.0, 1.0, 0.5],   # ViT, ViT(224), TSN, irCSN, Obj
    "ek55": [1.5, 1.5, 1.5, 1.0, 1.0],    # ViT, irCSN, TSN, Flow, Obj
}


def late_fuse(weighted_sets):
    """Weighted sum of per-clip probability vectors, renormalized to sum 1.

    `weighted_sets`: list of (predictions, weight); all sets must cover the
    same clip ids with the same class count.
    """
    if not weighted_sets:
        raise EvalError("nothing to fuse")
    base, _ = weighted_sets[0]
    index = {p.clip_id: p for p in base}
    k = len(base[0].scores)
    for preds, _ in weighted_sets[1:]:
        ids = {p.clip_id for p in preds}
        missing = sorted(set(index) ^ ids)
        if missing:
            raise EvalError(f"prediction sets disagree on clips: {missing[:10]}")
        if any(len(p.scores) != k for p in preds):
            raise EvalError("prediction sets disagree on class count")
    fused = []
    for p in base:
        acc = np.zeros(k)
        for preds, weight in weighted_sets:
            match = next(q for q in preds if q.clip_id == p.clip_id)
            acc += weight * np.asarray(match.scores)
        total = acc.sum()
        if total <= 0:
            raise EvalError(f"clip {p.clip_id}: fused mass is not positive")
        fused.append(Prediction(p.clip_id, acc / total, p.truth))
    return fused


# -- verb/noun marginalization ----------------------------------------------------

def marginalize(preds, action_map, component):
    """Collapse action scores through an action -> (verb, noun) map.

    `action_map`: dict action index -> (verb index, noun index);
    `component`: "verb" or "noun".
    """
    slot = {"verb": 0, "noun": 1}[component]
    n_out = max(v[slot] for v in action_map.values()) + 1
    out = []
    for p in preds:
        scores = np.zeros(n_out)
        for action, parts in action_map.items():
            scores[parts[slot]] += p.scores[action]
        out.append(Prediction(p.clip_id, scores, action_map[p.truth][slot]))
    return out


# -- model evaluation ----------------------------------------------------------------

def predict_dataset(model, clips, clip_ids=None, n_steps=0):
    preds = []
    for i, (feats, target, _) in enumerate(clips):
        cid = clip_ids[i] if clip_ids else f"clip_{i:05d}"
        preds.append(Prediction(cid, model.predict(feats, n_steps=n_steps),
                                target))
    return preds


def eval_variable_tau(model, manifest, clips, tau_list, clip_ids=None,
                      metric=topk_accuracy, k=1):
    """Metric per anticipation gap; gaps beyond the training gap are reached
    by autoregressive rollout at round((tau - tau_train) * fps) steps."""
    rows = []
    for tau in tau_list:
        if tau < manifest.tau_a:
            raise ConfigError(f"tau_a {tau} below training value "
                              f"{manifest.tau_a}")
        n_steps = int(round((tau - manifest.tau_a) * manifest.fps))
        preds = predict_dataset(model, clips, clip_ids, n_steps=n_steps)
        value = metric(preds, k) if metric is topk_accuracy else metric(preds)
        rows.append({"tau_a": tau, "n_steps": n_steps, "metric": value})
    return rows


def prototype_ratio_sweep(model, clips, ratios, clip_ids=None,
                          metric=topk_accuracy, k=1):
    """Evaluate under prototype subsets of each ratio (fixed seeded subsets).

    Reports the metric and the comparison count per representation.
    """
    saved = model.subset
    rows = []
    try:
        for ratio in ratios:
            model.subset = semantic.choose_subset(
                model.config.num_classes, ratio, model.config.subset_seed)
            preds = predict_dataset(model, clips, clip_ids)
            value = metric(preds, k) if metric is topk_accuracy else metric(preds)
            rows.append({
                "ratio": ratio,
                "comparisons": len(model.subset),
                "metric": value,
            })
    finally:
        model.subset = saved
    return rows


# -- serialization ------------------------------------------------------------------

def write_predictions(path, preds):
    with open(path, "w") as fh:
        fh.write(json.dumps({"format": PREDICTIONS_FORMAT, "version": 1,
                             "K": len(preds[0].scores)}) + "\n")
        for p in preds:
            fh.write(json.dumps({"clip_id": p.clip_id, "truth": p.truth,
                                 "scores": [float(s) for s in p.scores]}) + "\n")


def read_predictions(path):
    with open(path) as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise FormatError(f"{path}: empty predictions file")
    header = json.loads(lines[0])
    if header.get("format") != PREDICTIONS_FORMAT:
        raise FormatError(f"{path}: not a {PREDICTIONS_FORMAT} file")
    preds = []
    for ln in lines[1:]:
        obj = json.loads(ln)
        scores = np.asarray(obj["scores"])
        if abs(scores.sum() - 1.0) > 1e-6:
            raise FormatError(
                f"{path}: clip {obj['clip_id']} scores sum to {scores.sum()}")
        preds.append(Prediction(obj["clip_id"], scores, obj["truth"]))
    return preds


def write_csv(path, rows, columns=None):
    if not rows:
        raise EvalError("no rows to write")
    columns = columns or list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)
