"""Attack harnesses: imposter replay/imitation and treadmill-style control.

Both harnesses are black-box over the classifier: they only call predict.
The treadmill attacker operates in feature space. Gait characteristics are
modeled as correlation clusters of the model's schema: controlling one
characteristic moves every feature in its cluster onto the victim's
template (mean plus small jitter), while uncontrolled features keep the
attacker's own values, drawn from real attacker feature rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import seeds
from .errors import AttackEvalError, SelectionError
from .features import extract
from .forest import EvalReport, ForestModel, feature_importance, predict_rows
from .model import FeatureId, WalkSession
from .selection import CorrelationMatrix


def wilson_interval(successes: int, trials: int, z: float = 1.96,
                    ) -> tuple[float, float]:
    """95% Wilson score interval for a binomial proportion."""
    if trials == 0:
        return (0.0, 1.0)
    p = successes / trials
    denom = 1.0 + z * z / trials
    center = (p + z * z / (2 * trials)) / denom
    half = (z / denom) * math.sqrt(p * (1 - p) / trials
                                   + z * z / (4 * trials * trials))
    return (max(0.0, center - half), min(1.0, center + half))


@dataclass
class AttackReport:
    victim_id: str
    attacker_id: str
    classifier_config: str
    benign: EvalReport | None
    attacker_fpr: float
    accepted: int = 0
    trials: int = 0
    fpr_ci95: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if not 0.0 <= self.attacker_fpr <= 1.0:
            raise AttackEvalError(f"attacker_fpr {self.attacker_fpr} outside [0, 1]")

    def to_dict(self) -> dict:
        return {
            "victim_id": self.victim_id,
            "attacker_id": self.attacker_id,
            "classifier_config": self.classifier_config,
            "victim_benign": None if self.benign is None else self.benign.to_dict(),
            "attacker_fpr": self.attacker_fpr,
            "accepted": self.accepted,
            "trials": self.trials,
            "fpr_ci95": list(self.fpr_ci95),
        }


def imposter_eval(model: ForestModel, attacker_sessions: list[WalkSession],
                  victim_benign: EvalReport | None,
                  threshold: float = 0.5,
                  classifier_config: str = "") -> AttackReport:
    """Fraction of the attacker's walk sessions the classifier accepts."""
    if not attacker_sessions:
        raise AttackEvalError("no attacker sessions")
    rows = np.stack([extract(s, model.schema).values for s in attacker_sessions])
    accept, _ = predict_rows(model, rows, threshold)
    accepted = int(accept.sum())
    trials = len(attacker_sessions)
    return AttackReport(
        victim_id=model.trained_for_user,
        attacker_id=attacker_sessions[0].user_id,
        classifier_config=classifier_config,
        benign=victim_benign,
        attacker_fpr=accepted / trials,
        accepted=accepted,
        trials=trials,
        fpr_ci95=wilson_interval(accepted, trials),
    )


def cluster_features(matrix: CorrelationMatrix, threshold: float,
                     ) -> list[list[FeatureId]]:
    """Connected components of the |sigma| >= threshold graph.

    Undefined correlations contribute no edges, so constant features end up
    as singletons. Components are ordered by their smallest canonical
    member; members are in canonical order. The result partitions the
    schema.
    """
    if not 0.0 < threshold < 1.0:
        raise SelectionError(f"threshold {threshold} outside (0, 1)")
    d = len(matrix.schema)
    sigma = matrix.sigma
    linked = np.abs(sigma) >= threshold
    linked &= ~np.isnan(sigma)
    seen = np.zeros(d, dtype=bool)
    groups: list[list[int]] = []
    for start in range(d):
        if seen[start]:
            continue
        stack = [start]
        seen[start] = True
        members = []
        while stack:
            i = stack.pop()
            members.append(i)
            for j in np.flatnonzero(linked[i] & ~seen).tolist():
                seen[j] = True
                stack.append(j)
        groups.append(sorted(members))
    groups.sort(key=lambda g: g[0])
    return [[matrix.schema[i] for i in g] for g in groups]


@dataclass
class TreadmillAttacker:
    """Feature-space attacker who controls k characteristic groups.

    template_mean/template_std describe the victim's training features
    (aligned to the target model schema); residual_rows are the attacker's
    own feature rows, used for everything not under control.
    """

    k: int
    template_mean: np.ndarray
    template_std: np.ndarray
    groups: list[list[FeatureId]]
    residual_rows: np.ndarray
    jitter_frac: float = 0.05
    attacker_id: str = ""

    def __post_init__(self):
        if self.k < 0:
            raise AttackEvalError("k must be >= 0")
        if len(self.residual_rows) == 0:
            raise AttackEvalError("attacker needs at least one residual row")


def build_treadmill_attacker(model: ForestModel, victim_rows: np.ndarray,
                             attacker_rows: np.ndarray,
                             matrix: CorrelationMatrix, threshold: float,
                             k: int, jitter_frac: float = 0.05,
                             attacker_id: str = "") -> TreadmillAttacker:
    """Assemble the attacker against a specific model from raw feature rows."""
    if tuple(matrix.schema) != tuple(model.schema):
        raise AttackEvalError("correlation matrix schema does not match model")
    victim_rows = np.asarray(victim_rows, dtype=np.float64)
    return TreadmillAttacker(
        k=k,
        template_mean=victim_rows.mean(axis=0),
        template_std=victim_rows.std(axis=0, ddof=1) if len(victim_rows) > 1
        else np.zeros(victim_rows.shape[1]),
        groups=cluster_features(matrix, threshold),
        residual_rows=np.asarray(attacker_rows, dtype=np.float64),
        jitter_frac=jitter_frac,
        attacker_id=attacker_id,
    )


def treadmill_eval(model: ForestModel, attacker: TreadmillAttacker,
                   n_trials: int, seed: int,
                   victim_benign: EvalReport | None = None,
                   threshold: float = 0.5,
                   classifier_config: str = "") -> AttackReport:
    """Acceptance rate of synthesized attack vectors over n_trials.

    The k groups with the largest summed feature importance are set to the
    victim template (mean + jitter_frac * std * noise); all other features
    come from one of the attacker's own rows per trial.
    """
    if n_trials < 1:
        raise AttackEvalError("n_trials must be >= 1")
    if attacker.k > len(attacker.groups):
        raise AttackEvalError(
            f"k={attacker.k} exceeds {len(attacker.groups)} groups")
    index = {fid: i for i, fid in enumerate(model.schema)}
    for group in attacker.groups:
        for fid in group:
            if fid not in index:
                raise AttackEvalError(f"group feature {fid} not in model schema")

    importance = feature_importance(model).per_feature
    ranked = sorted(
        attacker.groups,
        key=lambda g: (-sum(importance.get(f, 0.0) for f in g), g[0]))
    controlled = sorted(index[f] for g in ranked[:attacker.k] for f in g)
    controlled = np.array(controlled, dtype=np.int64)

    rng = seeds.generator(seed, "treadmill")
    # residual rows are drawn before any jitter so the same seed picks the
    # same attacker rows regardless of which model is under attack
    picks = rng.integers(0, len(attacker.residual_rows), size=n_trials)
    rows = attacker.residual_rows[picks].copy()
    if len(controlled):
        jitter = rng.standard_normal((n_trials, len(controlled)))
        rows[:, controlled] = (attacker.template_mean[controlled]
                               + attacker.jitter_frac
                               * attacker.template_std[controlled] * jitter)
    accept, _ = predict_rows(model, rows, threshold)
    accepted = int(accept.sum())
    return AttackReport(
        victim_id=model.trained_for_user,
        attacker_id=attacker.attacker_id,
        classifier_config=classifier_config,
        benign=victim_benign,
        attacker_fpr=accepted / n_trials,
        accepted=accepted,
        trials=n_trials,
        fpr_ci95=wilson_interval(accepted, n_trials),
    )
