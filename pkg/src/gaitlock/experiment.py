"""Per-user experiment assembly shared by the CLI and the test harnesses.

A user's classifier is trained one-vs-rest: positives are that user's
sessions, negatives an equal-count uniform draw (without replacement) from
everyone else's sessions, fixed by the experiment seed. Category semantics:

  overall     all features of the device mode
  general     one sensor subset shared by all users (best mean F-measure)
  individual  the best sensor subset per user

Reported cells follow the mean (std dev) across users convention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import seeds
from .corpus import Corpus
from .errors import CrossvalError, TrainError
from .features import FeatureMatrix, extract_matrix
from .forest import EvalReport, ForestParams, LabeledMatrix, crossval
from .model import DeviceKind, SensorKind, TraceKey, canonical_schema
from .selection import SensorSubset, _available_pairs, sensor_subset_search

CATEGORIES = ("overall", "general", "individual")
DEVICE_MODES = ("phone", "watch", "both")

METRIC_NAMES = ("fnr", "fpr", "f_measure", "recall", "precision")


def mode_devices(device_mode: str) -> set[DeviceKind]:
    if device_mode == "phone":
        return {DeviceKind.PHONE}
    if device_mode == "watch":
        return {DeviceKind.WATCH}
    if device_mode == "both":
        return set(DeviceKind)
    raise CrossvalError(f"unknown device mode {device_mode!r}")


def corpus_schema(corpus: Corpus, device_mode: str = "both",
                  pairs: list[TraceKey] | None = None):
    """Canonical schema over sensors present in every session of the mode."""
    if pairs is None:
        pairs = _available_pairs(corpus)
    devices = mode_devices(device_mode)
    pairs = [p for p in pairs if p[0] in devices]
    if not pairs:
        raise CrossvalError(f"corpus has no complete {device_mode} sensors")
    sensors: dict[DeviceKind, set[SensorKind]] = {}
    for dev, sen in pairs:
        sensors.setdefault(dev, set()).add(sen)
    return canonical_schema(sensors.keys(), sensors)


def negative_rows(fm: FeatureMatrix, user_id: str, seed: int) -> np.ndarray:
    """Row indices of the user's negatives: equal-count uniform draw."""
    user_ids = np.array(fm.user_ids)
    pos = np.flatnonzero(user_ids == user_id)
    if len(pos) == 0:
        raise TrainError(f"user {user_id!r} has no sessions")
    pool = np.flatnonzero(user_ids != user_id)
    if len(pool) < len(pos):
        raise TrainError(
            f"{len(pool)} other-user sessions cannot match {len(pos)} positives")
    rng = seeds.generator(seed, "negatives", user_id)
    picks = rng.choice(len(pool), size=len(pos), replace=False)
    return pool[np.sort(picks)]


def user_matrix_from(fm: FeatureMatrix, user_id: str, seed: int) -> LabeledMatrix:
    user_ids = np.array(fm.user_ids)
    pos = np.flatnonzero(user_ids == user_id)
    neg = negative_rows(fm, user_id, seed)
    rows = np.concatenate([pos, neg])
    y = np.concatenate([np.ones(len(pos), dtype=np.int8),
                        np.zeros(len(neg), dtype=np.int8)])
    return LabeledMatrix(fm.schema, fm.X[rows], y,
                         tuple(fm.session_ids[i] for i in rows))


def user_matrix(corpus: Corpus, user_id: str, seed: int,
                pairs: list[TraceKey] | None = None,
                device_mode: str = "both") -> LabeledMatrix:
    schema = corpus_schema(corpus, device_mode, pairs)
    fm = extract_matrix(corpus, schema)
    return user_matrix_from(fm, user_id, seed)


@dataclass
class UserResult:
    user_id: str
    report: EvalReport
    subset: SensorSubset | None = None

    def to_dict(self) -> dict:
        d = {"user_id": self.user_id, "metrics": self.report.to_dict()}
        if self.subset is not None:
            d["subset"] = self.subset.render()
        return d


@dataclass
class EvalSummary:
    device_mode: str
    category: str
    k: int
    per_user: list[UserResult]
    cells: dict[str, tuple[float, float]]  # metric -> (mean, std)
    general_subset: SensorSubset | None = None

    def to_dict(self) -> dict:
        d = {
            "device_mode": self.device_mode,
            "category": self.category,
            "k": self.k,
            "cells": {m: {"mean": v[0], "std": v[1]}
                      for m, v in self.cells.items()},
            "per_user": [u.to_dict() for u in self.per_user],
        }
        if self.general_subset is not None:
            d["general_subset"] = self.general_subset.render()
        return d

    def format_table(self) -> str:
        head = f"category={self.category} device_mode={self.device_mode} k={self.k}"
        cols = "  ".join(f"{m:>18}" for m in METRIC_NAMES)
        cells = "  ".join(
            f"{self.cells[m][0]:.3f} ({self.cells[m][1]:.3f})".rjust(18)
            for m in METRIC_NAMES)
        lines = [head, cols, cells, ""]
        for u in self.per_user:
            r = u.report
            row = "  ".join(f"{getattr(r, m):.3f}".rjust(18)
                            for m in METRIC_NAMES)
            suffix = f"  [{u.subset.render()}]" if u.subset else ""
            lines.append(f"{u.user_id}: {row}{suffix}")
        return "\n".join(lines) + "\n"


def _aggregate(per_user: list[UserResult]) -> dict[str, tuple[float, float]]:
    cells = {}
    for m in METRIC_NAMES:
        vals = np.array([getattr(u.report, m) for u in per_user])
        std = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        cells[m] = (float(vals.mean()), std)
    return cells


def general_best_subset(corpus: Corpus, device_mode: str, k: int,
                        params: ForestParams, seed: int,
                        search: str = "greedy", n_jobs: int = 1,
                        ) -> tuple[SensorSubset, float]:
    """Sensor subset with the best mean cross-val F-measure across users.

    greedy does forward selection over sensors; exhaustive tries every
    non-empty subset of the mode's available sensors.
    """
    pairs = [p for p in _available_pairs(corpus)
             if p[0] in mode_devices(device_mode)]
    if not pairs:
        raise CrossvalError(f"no complete {device_mode} sensors")
    schema = corpus_schema(corpus, device_mode, pairs)
    fm = extract_matrix(corpus, schema)
    users = corpus.user_ids()
    matrices = {u: user_matrix_from(fm, u, seed) for u in users}

    def mean_f(subset: SensorSubset) -> float:
        sub_schema = subset.schema()
        total = 0.0
        for u in users:
            rep = crossval(matrices[u].restrict(sub_schema), k, params,
                           seeds.derive_seed(seed, "eval", u), n_jobs=n_jobs)
            total += rep.f_measure
        return total / len(users)

    if search == "exhaustive":
        import itertools
        best: tuple[float, SensorSubset] | None = None
        for r in range(1, len(pairs) + 1):
            for combo in itertools.combinations(pairs, r):
                subset = SensorSubset.from_pairs(combo)
                f = mean_f(subset)
                key = (-f, subset.size(), subset.sort_key())
                if best is None or key < (-best[0], best[1].size(),
                                          best[1].sort_key()):
                    best = (f, subset)
        return best[1], best[0]

    if search == "greedy":
        chosen: list[TraceKey] = []
        best_f = -1.0
        remaining = list(pairs)
        while remaining:
            scored = []
            for p in remaining:
                subset = SensorSubset.from_pairs(chosen + [p])
                scored.append((mean_f(subset), subset, p))
            scored.sort(key=lambda t: (-t[0], t[1].sort_key()))
            top_f, _, top_pair = scored[0]
            if top_f <= best_f:
                break
            best_f = top_f
            chosen.append(top_pair)
            remaining.remove(top_pair)
        return SensorSubset.from_pairs(chosen), best_f

    raise CrossvalError(f"unknown general search {search!r}")


def evaluate_users(corpus: Corpus, device_mode: str, category: str, k: int,
                   params: ForestParams, seed: int,
                   general_subset: SensorSubset | None = None,
                   individual_search: str = "combined_greedy",
                   n_jobs: int = 1) -> EvalSummary:
    """Per-user cross-validation for one (category, device mode) cell."""
    if category not in CATEGORIES:
        raise CrossvalError(f"unknown category {category!r}")
    devices = mode_devices(device_mode)
    pairs = [p for p in _available_pairs(corpus) if p[0] in devices]
    schema = corpus_schema(corpus, device_mode, pairs)
    fm = extract_matrix(corpus, schema)
    users = corpus.user_ids()
    per_user: list[UserResult] = []

    if category == "general" and general_subset is None:
        general_subset, _ = general_best_subset(corpus, device_mode, k,
                                                params, seed, n_jobs=n_jobs)

    for u in users:
        user_seed = seeds.derive_seed(seed, "eval", u)
        if category == "individual":
            ranked = sensor_subset_search(
                corpus, u, individual_search, k, params, seed,
                devices=devices, n_jobs=n_jobs)
            top = ranked[0]
            per_user.append(UserResult(u, top.report, top.subset))
            continue
        data = user_matrix_from(fm, u, seed)
        if category == "general":
            data = data.restrict(general_subset.schema())
        per_user.append(UserResult(u, crossval(data, k, params, user_seed,
                                               n_jobs=n_jobs)))

    return EvalSummary(device_mode, category, k, per_user,
                       _aggregate(per_user),
                       general_subset if category == "general" else None)
