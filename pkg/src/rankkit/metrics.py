"""Offline evaluation: AUC, the replay contribution rate, the global +
random-effect logit combination, and the metrics report writer."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.stats import rankdata

from .calibration import oe_ratio
from .datagen import ReplaySession, TrainingExample
from .errors import InputError, UndefinedMetricError


def auc(labels, scores) -> float:
    """Mann-Whitney U / (n_pos * n_neg), ties counted one half."""
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    if labels.shape != scores.shape:
        raise InputError("labels and scores must have equal length")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = int(labels.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative label")
    ranks = rankdata(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class ReplayResult:
    rate: float | None
    matched: int
    matched_with_contribution: int

    @property
    def defined(self) -> bool:
        return self.matched > 0

    def to_json(self) -> dict:
        return {"rate": self.rate, "matched": self.matched, "matched_with_contribution": self.matched_with_contribution}


class UndefinedReplayRate(UndefinedMetricError):
    def __init__(self, result: ReplayResult):
        super().__init__(f"no matched impressions at position 1 ({result.matched} matched)")
        self.result = result


Scorer = Callable[[list[TrainingExample]], np.ndarray]


def replay_contribution_rate(sessions: list[ReplaySession], scorer: Scorer, strict: bool = False) -> ReplayResult:
    """# matched imps @ 1 with contribution / # matched imps @ 1.

    The scorer re-ranks each session's served items (descending score,
    ties by served order); a session is matched when its top item equals
    the served top item. With no matches the rate is ``None`` (or
    :class:`UndefinedReplayRate` is raised when ``strict``).
    """
    matched = hits = 0
    for s in sessions:
        items = s.served_ranking
        scores = np.asarray(scorer([s.candidate_features[i] for i in items]), dtype=np.float64)
        if scores.shape != (len(items),):
            raise InputError(f"scorer returned shape {scores.shape} for {len(items)} items")
        top = min(range(len(items)), key=lambda i: (-scores[i], i))
        if top == 0:
            matched += 1
            if items[0] in s.contributions:
                hits += 1
    result = ReplayResult(hits / matched if matched else None, matched, hits)
    if strict and not matched:
        raise UndefinedReplayRate(result)
    return result


def served_order_scorer(sessions: list[ReplaySession]) -> Scorer:
    """Scores that reproduce each session's served order (self-replay)."""
    lookup = {}
    for s in sessions:
        for pos, item in enumerate(s.served_ranking):
            lookup[id(s.candidate_features[item])] = -float(pos)

    def score(examples):
        return np.array([lookup[id(ex)] for ex in examples])

    return score


_CLAMP = 1e-12


def _logit(p):
    p = np.clip(np.asarray(p, dtype=np.float64), _CLAMP, 1.0 - _CLAMP)
    return np.log(p / (1.0 - p))


def combine_logits(p_global, p_random_effect):
    """sigmoid(logit(p_global) + logit(p_random_effect)); inputs clamped to
    [1e-12, 1 - 1e-12]."""
    z = _logit(p_global) + _logit(p_random_effect)
    out = 1.0 / (1.0 + np.exp(-z))
    return float(out) if np.ndim(out) == 0 else out


def metrics_report(labels, probs, tasks, replay: ReplayResult | None = None, extra: dict | None = None) -> dict:
    """Report dict: headline ``auc``/``oe_ratio`` are the first task's; per-task
    values under ``per_task``. Undefined metrics are reported as null."""
    mask = ~np.ma.getmaskarray(labels) if isinstance(labels, np.ma.MaskedArray) else None
    labels = np.ma.getdata(labels)
    probs = np.asarray(probs, dtype=np.float64)
    per_task = {}
    for j, t in enumerate(tasks):
        m = mask[:, j] if mask is not None else np.ones(len(labels), dtype=bool)
        y, p = np.asarray(labels)[m, j], probs[m, j]
        entry = {"n": int(m.sum()), "positives": int(np.sum(y == 1))}
        try:
            entry["auc"] = auc(y, p)
        except UndefinedMetricError:
            entry["auc"] = None
        try:
            entry["oe_ratio"] = oe_ratio(y, p)
        except (UndefinedMetricError, InputError):
            entry["oe_ratio"] = None
        per_task[t] = entry
    head = per_task[tasks[0]]
    report = {
        "auc": head["auc"],
        "oe_ratio": head["oe_ratio"],
        "replay": replay.to_json() if replay is not None else None,
        "per_task": per_task,
    }
    if extra:
        report.update(extra)
    return report


def write_report(report: dict, json_path, csv_path=None):
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if csv_path is not None:
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "task", "value"])
            for t, entry in report["per_task"].items():
                for k in ("auc", "oe_ratio", "n", "positives"):
                    w.writerow([k, t, "" if entry[k] is None else repr(entry[k])])
            if report.get("replay"):
                for k, v in report["replay"].items():
                    w.writerow([f"replay_{k}", "", "" if v is None else repr(v)])
