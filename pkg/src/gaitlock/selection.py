"""Sensor-subset search, pairwise feature correlation, uncorrelated cores.

Correlation uses the sum-of-products form
    S_xx = sum(x^2) - (sum x)^2 / n,   S_xy = sum(xy) - (sum x)(sum y) / n,
    sigma = S_xy / sqrt(S_xx * S_yy)
which needs no precomputed deviation scores; it is numerically checked
against the two-pass mean-centered form in the test suite. A feature pair
whose S_xx or S_yy is zero (constant column) has undefined correlation.

"Best" subset means highest aggregate F-measure under stratified k-fold
cross-validation; ties prefer fewer sensors, then canonical order.
Correlation for the defense is computed on the positive-class rows only
(the victim's own template is what an active attacker targets).
"""

from __future__ import annotations

import csv
import itertools
import math
import warnings
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .corpus import Corpus
from .errors import CrossvalError, DimError, SelectionError
from .forest import EvalReport, ForestParams, LabeledMatrix, crossval
from .model import (
    DeviceKind,
    FeatureId,
    SensorKind,
    TraceKey,
    canonical_schema,
    validate_schema,
)

_DEV_IDX = {d: i for i, d in enumerate(DeviceKind)}
_SEN_IDX = {s: i for i, s in enumerate(SensorKind)}


def correlation(x, y) -> float | None:
    """Pearson correlation via the sum-of-products form; None if undefined."""
    xv = np.asarray(x, dtype=np.float64)
    yv = np.asarray(y, dtype=np.float64)
    if xv.ndim != 1 or yv.ndim != 1 or len(xv) != len(yv):
        raise DimError(f"length mismatch: {xv.shape} vs {yv.shape}")
    n = len(xv)
    if n < 2:
        raise DimError("need at least 2 samples")
    sx, sy = xv.sum(), yv.sum()
    sxx = float(xv @ xv) - sx * sx / n
    syy = float(yv @ yv) - sy * sy / n
    if sxx <= 0.0 or syy <= 0.0:
        return None
    sxy = float(xv @ yv) - sx * sy / n
    return float(np.clip(sxy / math.sqrt(sxx * syy), -1.0, 1.0))


@dataclass
class CorrelationMatrix:
    """Symmetric pairwise correlations; NaN marks undefined entries."""

    schema: tuple[FeatureId, ...]
    sigma: np.ndarray

    def __post_init__(self):
        self.schema = validate_schema(self.schema)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        d = len(self.schema)
        if self.sigma.shape != (d, d):
            raise DimError(f"sigma shape {self.sigma.shape} vs {d} ids")

    def defined(self, i: int, j: int) -> bool:
        return not np.isnan(self.sigma[i, j])


def correlation_matrix(rows: np.ndarray, schema) -> CorrelationMatrix:
    """All pairwise column correlations of a (n, d) matrix."""
    X = np.asarray(rows, dtype=np.float64)
    if X.ndim != 2:
        raise DimError("need a 2-d row matrix")
    n = len(X)
    if n < 2:
        raise DimError("need at least 2 rows")
    s = X.sum(axis=0)
    S = X.T @ X - np.outer(s, s) / n
    S = (S + S.T) / 2.0
    v = np.diag(S).copy()
    undef = v <= 0.0
    v_safe = np.where(undef, 1.0, v)
    sigma = S / np.sqrt(np.outer(v_safe, v_safe))
    sigma = np.clip((sigma + sigma.T) / 2.0, -1.0, 1.0)
    np.fill_diagonal(sigma, 1.0)
    sigma[undef, :] = np.nan
    sigma[:, undef] = np.nan
    return CorrelationMatrix(tuple(schema), sigma)


def matrix_correlations(data: LabeledMatrix, positive_only: bool = True,
                        ) -> CorrelationMatrix:
    rows = data.X[data.y == 1] if positive_only else data.X
    return correlation_matrix(rows, data.schema)


def write_heatmap_csv(matrix: CorrelationMatrix, path,
                      meta: dict | None = None) -> None:
    """Square CSV with feature-id row/column headers (heatmap source data)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if meta:
            pairs = " ".join(f"{k}={meta[k]}" for k in sorted(meta))
            fh.write(f"# {pairs}\n")
        writer = csv.writer(fh, lineterminator="\n")
        names = [fid.render() for fid in matrix.schema]
        writer.writerow([""] + names)
        for i, name in enumerate(names):
            writer.writerow([name] + [repr(v) for v in matrix.sigma[i].tolist()])


# ---------------------------------------------------------------------------
# Sensor subsets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SensorSubset:
    """Selected sensors per device; at least one pair overall."""

    phone: frozenset[SensorKind] = frozenset()
    watch: frozenset[SensorKind] = frozenset()

    def __post_init__(self):
        if not self.phone and not self.watch:
            raise SelectionError("sensor subset must select at least one sensor")

    @classmethod
    def from_pairs(cls, pairs: Iterable[TraceKey]) -> "SensorSubset":
        phone, watch = set(), set()
        for dev, sen in pairs:
            (phone if dev is DeviceKind.PHONE else watch).add(sen)
        return cls(frozenset(phone), frozenset(watch))

    def pairs(self) -> tuple[TraceKey, ...]:
        out = [(DeviceKind.PHONE, s) for s in self.phone]
        out += [(DeviceKind.WATCH, s) for s in self.watch]
        return tuple(sorted(out, key=lambda p: (_DEV_IDX[p[0]], _SEN_IDX[p[1]])))

    def size(self) -> int:
        return len(self.phone) + len(self.watch)

    def sort_key(self) -> tuple:
        return tuple((_DEV_IDX[d], _SEN_IDX[s]) for d, s in self.pairs())

    def schema(self) -> list[FeatureId]:
        devices = set()
        sensors = {}
        if self.phone:
            devices.add(DeviceKind.PHONE)
            sensors[DeviceKind.PHONE] = self.phone
        if self.watch:
            devices.add(DeviceKind.WATCH)
            sensors[DeviceKind.WATCH] = self.watch
        return canonical_schema(devices, sensors)

    def render(self) -> str:
        def side(dev, sensors):
            if not sensors:
                return f"{dev.value}:-"
            names = [s.value for s in SensorKind if s in sensors]
            return f"{dev.value}:" + "+".join(names)
        return "|".join([side(DeviceKind.PHONE, self.phone),
                         side(DeviceKind.WATCH, self.watch)])

    @classmethod
    def parse(cls, text: str) -> "SensorSubset":
        phone, watch = set(), set()
        for part in text.split("|"):
            dev_name, _, rest = part.partition(":")
            try:
                dev = DeviceKind(dev_name)
            except ValueError as exc:
                raise SelectionError(f"bad device in subset {text!r}") from exc
            if rest in ("", "-"):
                continue
            for name in rest.split("+"):
                try:
                    sen = SensorKind(name)
                except ValueError as exc:
                    raise SelectionError(f"bad sensor {name!r}") from exc
                (phone if dev is DeviceKind.PHONE else watch).add(sen)
        return cls(frozenset(phone), frozenset(watch))


@dataclass
class SubsetReport:
    subset: SensorSubset
    report: EvalReport
    rank: int = 0

    def to_dict(self) -> dict:
        return {"subset": self.subset.render(), "rank": self.rank,
                "metrics": self.report.to_dict()}


def _available_pairs(corpus: Corpus) -> list[TraceKey]:
    """(device, sensor) pairs carried non-empty by every session."""
    pairs: set[TraceKey] | None = None
    for s in corpus.sessions:
        have = {k for k, t in s.traces.items() if len(t)}
        pairs = have if pairs is None else pairs & have
    out = sorted(pairs or (), key=lambda p: (_DEV_IDX[p[0]], _SEN_IDX[p[1]]))
    if not out:
        raise CrossvalError("no (device, sensor) pair is present in all sessions")
    return out


def _rank_sorted(reports: list[SubsetReport]) -> list[SubsetReport]:
    reports.sort(key=lambda r: (-r.report.f_measure, r.subset.size(),
                                r.subset.sort_key()))
    for i, r in enumerate(reports):
        r.rank = i + 1
    return reports


def sensor_subset_search(corpus: Corpus, user_id: str, mode: str, k: int,
                         params: ForestParams, seed: int,
                         device: DeviceKind | None = None,
                         devices: Iterable[DeviceKind] | None = None,
                         n_jobs: int = 1) -> list[SubsetReport]:
    """Rank candidate sensor subsets by cross-validated F-measure.

    Modes: ``per_device_exhaustive`` (all non-empty subsets of one device's
    available sensors; 255 when all 8 are present), ``combined_exhaustive``
    (all non-empty subsets of all available pairs) and ``combined_greedy``
    (forward selection over sensors, reporting each accepted step).
    ``devices`` restricts the candidate universe to one side.
    """
    from .experiment import user_matrix  # local import: avoids module cycle

    pairs = _available_pairs(corpus)
    if devices is not None:
        allowed = set(devices)
        pairs = [p for p in pairs if p[0] in allowed]
        if not pairs:
            raise CrossvalError("no available sensors for requested devices")
    matrix = user_matrix(corpus, user_id, seed, pairs=pairs)

    def evaluate(subset: SensorSubset) -> SubsetReport:
        sub = matrix.restrict(subset.schema())
        rep = crossval(sub, k, params, seed, n_jobs=n_jobs)
        return SubsetReport(subset, rep)

    if mode == "per_device_exhaustive":
        if device is None:
            raise SelectionError("per_device_exhaustive needs a device")
        own = [p for p in pairs if p[0] is device]
        if not own:
            raise CrossvalError(f"no {device.value} sensors in corpus")
        reports = []
        for r in range(1, len(own) + 1):
            for combo in itertools.combinations(own, r):
                reports.append(evaluate(SensorSubset.from_pairs(combo)))
        return _rank_sorted(reports)

    if mode == "combined_exhaustive":
        reports = []
        for r in range(1, len(pairs) + 1):
            for combo in itertools.combinations(pairs, r):
                reports.append(evaluate(SensorSubset.from_pairs(combo)))
        return _rank_sorted(reports)

    if mode == "combined_greedy":
        chosen: list[TraceKey] = []
        best_f = -1.0
        accepted: list[SubsetReport] = []
        remaining = list(pairs)
        while remaining:
            step = [evaluate(SensorSubset.from_pairs(chosen + [p]))
                    for p in remaining]
            step.sort(key=lambda r: (-r.report.f_measure, r.subset.sort_key()))
            top = step[0]
            if top.report.f_measure <= best_f:
                break
            best_f = top.report.f_measure
            new_pairs = set(top.subset.pairs())
            added = next(p for p in remaining if p in new_pairs - set(chosen))
            chosen.append(added)
            remaining.remove(added)
            accepted.append(top)
        return _rank_sorted(accepted)

    raise SelectionError(f"unknown subset search mode {mode!r}")


# ---------------------------------------------------------------------------
# Uncorrelated feature subsets (defense core)
# ---------------------------------------------------------------------------

def _candidate_indices(matrix: CorrelationMatrix) -> list[int]:
    # constant features have NaN rows: excluded outright
    return [i for i in range(len(matrix.schema)) if matrix.defined(i, i)]


def uncorrelated_subset(matrix: CorrelationMatrix, threshold: float,
                        importance: dict[FeatureId, float],
                        mode: str = "greedy") -> list[FeatureId]:
    """A feature set whose pairwise |sigma| stays below ``threshold``.

    greedy: visit candidates by descending importance, keep compatible
    ones; the result is maximal. exact: maximum-cardinality compatible set
    by branch and bound (capped at 25 candidates). Output is returned in
    canonical order.
    """
    if not 0.0 < threshold < 1.0:
        raise SelectionError(f"threshold {threshold} outside (0, 1)")
    cand = _candidate_indices(matrix)
    if not cand:
        warnings.warn("no features with defined correlations; empty subset")
        return []
    sigma = matrix.sigma

    def compatible(i: int, chosen: list[int]) -> bool:
        return all(abs(sigma[i, j]) < threshold for j in chosen)

    if mode == "greedy":
        order = sorted(cand, key=lambda i: (-importance.get(matrix.schema[i], 0.0),
                                            matrix.schema[i]))
        chosen: list[int] = []
        for i in order:
            if compatible(i, chosen):
                chosen.append(i)
        return [matrix.schema[i] for i in sorted(chosen)]

    if mode == "exact":
        if len(cand) > 25:
            raise SelectionError(
                f"exact mode limited to 25 candidates, got {len(cand)}")
        conflict = {i: set() for i in cand}
        for a, b in itertools.combinations(cand, 2):
            if not abs(sigma[a, b]) < threshold:
                conflict[a].add(b)
                conflict[b].add(a)
        best: list[int] = []

        def bound_and_branch(idx: int, chosen: list[int], banned: set[int]):
            nonlocal best
            if len(chosen) > len(best):
                best = list(chosen)
            if idx == len(cand):
                return
            free_left = sum(1 for j in cand[idx:] if j not in banned)
            if len(chosen) + free_left <= len(best):
                return
            i = cand[idx]
            if i not in banned:
                bound_and_branch(idx + 1, chosen + [i], banned | conflict[i])
            bound_and_branch(idx + 1, chosen, banned)

        bound_and_branch(0, [], set())
        return [matrix.schema[i] for i in sorted(best)]

    raise SelectionError(f"unknown uncorrelated subset mode {mode!r}")


def defense_superset(core: Sequence[FeatureId], data: LabeledMatrix, k: int,
                     params: ForestParams, seed: int, min_gain: float = 1e-4,
                     n_jobs: int = 1) -> list[FeatureId]:
    """Grow the uncorrelated core by forward selection on cross-val F.

    Each step adds the feature improving aggregate F-measure the most;
    stops when no candidate improves it by more than ``min_gain``. The
    result always contains the core.
    """
    core_ids = sorted(set(core))
    if not core_ids:
        raise SelectionError("core must be non-empty")
    have = set(data.schema)
    if not set(core_ids) <= have:
        raise SelectionError("core features missing from data schema")

    current = list(core_ids)
    best_f = crossval(data.restrict(current), k, params, seed,
                      n_jobs=n_jobs).f_measure
    remaining = [fid for fid in data.schema if fid not in set(current)]
    while remaining:
        scored = []
        for fid in remaining:
            trial = sorted(current + [fid])
            f = crossval(data.restrict(trial), k, params, seed,
                         n_jobs=n_jobs).f_measure
            scored.append((f, fid))
        scored.sort(key=lambda t: (-t[0], t[1]))
        top_f, top_id = scored[0]
        if top_f <= best_f + min_gain:
            break
        best_f = top_f
        current = sorted(current + [top_id])
        remaining.remove(top_id)
    return current
