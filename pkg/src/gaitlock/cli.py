"""One command-line entry point wiring all stages into reproducible runs.

Subcommands hand results between stages through files: synth -> corpus JSON,
extract -> feature CSV, train -> model JSON, eval/subsets/attack -> report
JSON (+ text), corr -> heatmap CSV, simulate -> transcript JSON lines. Every
artifact embeds schema_version, the hash of the fully resolved config, and
the seed, so identical invocations rewrite identical bytes.

Config precedence: built-in defaults < --config JSON file < command flags.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass
from pathlib import Path

from . import __version__
from .attacks import build_treadmill_attacker, imposter_eval, treadmill_eval
from .corpus import (
    Corpus,
    load_corpus,
    save_corpus,
    synth_corpus,
    synth_imitator,
    synth_profile,
    synth_session,
)
from .errors import ConfigError, GaitlockError
from .experiment import evaluate_users, general_best_subset, user_matrix_from
from .features import extract_matrix, write_matrix_csv
from .forest import ForestParams, crossval, load_model, save_model, train
from .forest import feature_importance
from .model import DeviceKind, schema_for_mode
from .selection import (
    SensorSubset,
    matrix_correlations,
    sensor_subset_search,
    uncorrelated_subset,
    write_heatmap_csv,
)
from . import seeds
from .simulate import load_scenario, run_simulation, write_transcript

REPORT_SCHEMA_VERSION = 1


@dataclass
class ExperimentConfig:
    seed: int = 7
    out: str = "out"
    corpus: str | None = None
    device_mode: str = "both"
    category: str = "overall"
    threads: int = 1
    # synth
    users: int = 18
    sessions: int = 50
    # extract
    policy: str = "strict"
    positive_user: str | None = None
    # forest
    k: int = 10
    n_trees: int = 100
    max_depth: int | None = None
    min_leaf: int = 1
    features_per_split: int | None = None
    bootstrap: bool = True
    decision_threshold: float = 0.5
    # selection
    user: str | None = None
    subset_mode: str = "combined_greedy"
    subset_device: str | None = None
    sensors: str | None = None
    corr_threshold: float = 0.1    # uncorrelated-core bound
    group_threshold: float = 0.5   # characteristic-cluster bound
    # attacks
    attack_kind: str = "imposter"
    victim: str | None = None
    attacker: str | None = None
    strength: float = 1.0
    imitate: str = "phone"
    attempts: int = 20
    k_groups: int = 4
    n_trials: int = 100
    jitter_frac: float = 0.05
    defended: bool = False
    # simulate
    scenario: str | None = None
    model: str | None = None
    fallback_model: str | None = None

    def forest_params(self) -> ForestParams:
        return ForestParams(
            n_trees=self.n_trees, max_depth=self.max_depth,
            min_leaf=self.min_leaf, features_per_split=self.features_per_split,
            bootstrap=self.bootstrap)

    def resolved(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.resolved(), sort_keys=True,
                          separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _merge_config(args: argparse.Namespace) -> ExperimentConfig:
    values = {}
    if getattr(args, "config", None):
        try:
            with open(args.config, "r", encoding="utf-8") as fh:
                file_values = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}")
        if not isinstance(file_values, dict):
            raise ConfigError("config file must hold a JSON object")
        known = {f.name for f in dataclasses.fields(ExperimentConfig)}
        unknown = set(file_values) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        values.update(file_values)
    for f in dataclasses.fields(ExperimentConfig):
        flag = getattr(args, f.name, None)
        if flag is not None:
            values[f.name] = flag
    return ExperimentConfig(**values)


def _meta(config: ExperimentConfig) -> dict:
    return {"schema_version": REPORT_SCHEMA_VERSION,
            "config_hash": config.config_hash(), "seed": config.seed}


def _out_dir(config: ExperimentConfig) -> Path:
    path = Path(config.out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_report(path: Path, doc: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def _load_corpus(config: ExperimentConfig) -> Corpus:
    if not config.corpus:
        raise ConfigError("--corpus is required for this command")
    return load_corpus(config.corpus)


def _subset_or_none(config: ExperimentConfig) -> SensorSubset | None:
    return SensorSubset.parse(config.sensors) if config.sensors else None


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_synth(config: ExperimentConfig) -> int:
    corpus = synth_corpus(config.seed, config.users, config.sessions)
    out = _out_dir(config) / "corpus.json"
    save_corpus(corpus, out, extra={"config_hash": config.config_hash()})
    print(f"wrote {out} ({config.users} users x {config.sessions} sessions, "
          f"{len(corpus.sessions)} total)")
    return 0


def cmd_extract(config: ExperimentConfig) -> int:
    corpus = _load_corpus(config)
    fm = extract_matrix(corpus, schema_for_mode(config.device_mode),
                        config.policy)
    out = _out_dir(config) / f"features-{config.device_mode}.csv"
    write_matrix_csv(fm, out, positive_user=config.positive_user,
                     meta=_meta(config))
    print(f"wrote {out} ({len(fm.session_ids)} rows x {len(fm.schema)} features)")
    return 0


def cmd_train(config: ExperimentConfig) -> int:
    if not config.user:
        raise ConfigError("--user is required for train")
    corpus = _load_corpus(config)
    subset = _subset_or_none(config)
    schema = (subset.schema() if subset
              else schema_for_mode(config.device_mode))
    fm = extract_matrix(corpus, schema)
    data = user_matrix_from(fm, config.user, config.seed)
    model = train(data, config.forest_params(),
                  seeds.derive_seed(config.seed, "train", config.user),
                  trained_for_user=config.user, n_jobs=config.threads)
    out = _out_dir(config) / f"model-{config.user}-{config.device_mode}.json"
    save_model(model, out, extra={"config_hash": config.config_hash()})
    print(f"wrote {out} ({len(model.trees)} trees, {len(model.schema)} features)")
    return 0


def cmd_eval(config: ExperimentConfig) -> int:
    corpus = _load_corpus(config)
    summary = evaluate_users(
        corpus, config.device_mode, config.category, config.k,
        config.forest_params(), config.seed,
        general_subset=_subset_or_none(config), n_jobs=config.threads)
    doc = _meta(config)
    doc["kind"] = "eval"
    doc["summary"] = summary.to_dict()
    out = _out_dir(config)
    json_path = out / f"eval-{config.category}-{config.device_mode}.json"
    text_path = out / f"eval-{config.category}-{config.device_mode}.txt"
    _write_report(json_path, doc)
    with open(text_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# config_hash={config.config_hash()} seed={config.seed}\n")
        fh.write(summary.format_table())
    print(summary.format_table())
    print(f"wrote {json_path} and {text_path}")
    return 0


def cmd_subsets(config: ExperimentConfig) -> int:
    corpus = _load_corpus(config)
    device = DeviceKind(config.subset_device) if config.subset_device else None
    if config.user:
        reports = sensor_subset_search(
            corpus, config.user, config.subset_mode, config.k,
            config.forest_params(), config.seed, device=device,
            n_jobs=config.threads)
        payload = [r.to_dict() for r in reports]
        name = f"subsets-{config.user}.json"
    else:
        subset, mean_f = general_best_subset(
            corpus, config.device_mode, config.k, config.forest_params(),
            config.seed, n_jobs=config.threads)
        payload = [{"subset": subset.render(), "mean_f_measure": mean_f}]
        name = f"subsets-general-{config.device_mode}.json"
    doc = _meta(config)
    doc["kind"] = "subsets"
    doc["reports"] = payload
    out = _out_dir(config) / name
    _write_report(out, doc)
    print(f"wrote {out} ({len(payload)} entries)")
    return 0


def cmd_corr(config: ExperimentConfig) -> int:
    if not config.user:
        raise ConfigError("--user is required for corr")
    corpus = _load_corpus(config)
    fm = extract_matrix(corpus, schema_for_mode(config.device_mode))
    data = user_matrix_from(fm, config.user, config.seed)
    matrix = matrix_correlations(data, positive_only=True)
    out = _out_dir(config) / f"corr-{config.user}-{config.device_mode}.csv"
    write_heatmap_csv(matrix, out, meta=_meta(config))
    print(f"wrote {out} ({len(matrix.schema)}x{len(matrix.schema)})")
    return 0


def _attacker_sessions(config: ExperimentConfig, corpus: Corpus):
    """Imitator walk sessions: profile-interpolated when the corpus is
    synthetic, otherwise the attacker's recorded sessions."""
    if corpus.seed is not None:
        victim_profile = synth_profile(corpus.seed, config.victim)
        attacker_profile = synth_profile(corpus.seed, config.attacker)
        if config.imitate == "both":
            devices = tuple(DeviceKind)
        else:
            devices = (DeviceKind(config.imitate),)
        imitator = synth_imitator(victim_profile, attacker_profile,
                                  config.strength, devices)
        return [synth_session(imitator, i,
                              seeds.derive_seed(config.seed, "attack"))
                for i in range(config.attempts)]
    sessions = corpus.by_user(config.attacker)
    if not sessions:
        raise ConfigError(f"attacker {config.attacker!r} has no sessions")
    return sessions


def cmd_attack(config: ExperimentConfig) -> int:
    if not config.victim or not config.attacker:
        raise ConfigError("--victim and --attacker are required for attack")
    corpus = _load_corpus(config)
    subset = _subset_or_none(config)
    schema = (subset.schema() if subset
              else schema_for_mode(config.device_mode))
    fm = extract_matrix(corpus, schema)
    data = user_matrix_from(fm, config.victim, config.seed)
    params = config.forest_params()
    benign = crossval(data, config.k, params,
                      seeds.derive_seed(config.seed, "eval", config.victim),
                      n_jobs=config.threads)
    model = train(data, params,
                  seeds.derive_seed(config.seed, "train", config.victim),
                  trained_for_user=config.victim, n_jobs=config.threads)
    label = f"{config.category}/{config.device_mode}"

    doc = _meta(config)
    doc["kind"] = f"attack-{config.attack_kind}"

    if config.attack_kind == "imposter":
        sessions = _attacker_sessions(config, corpus)
        report = imposter_eval(model, sessions, benign,
                               config.decision_threshold, label)
        doc["report"] = report.to_dict()
    elif config.attack_kind == "treadmill":
        matrix = matrix_correlations(data, positive_only=True)
        victim_rows = data.X[data.y == 1]
        attacker_rows = fm.X[[i for i, u in enumerate(fm.user_ids)
                              if u == config.attacker]]
        if len(attacker_rows) == 0:
            raise ConfigError(f"attacker {config.attacker!r} has no sessions")
        attacker = build_treadmill_attacker(
            model, victim_rows, attacker_rows, matrix,
            config.group_threshold, config.k_groups, config.jitter_frac,
            config.attacker)
        report = treadmill_eval(model, attacker, config.n_trials, config.seed,
                                benign, config.decision_threshold, label)
        doc["report"] = report.to_dict()
        if config.defended:
            importance = feature_importance(model).per_feature
            core = uncorrelated_subset(matrix, config.corr_threshold,
                                       importance, mode="greedy")
            core_data = data.restrict(core)
            core_model = train(
                core_data, params,
                seeds.derive_seed(config.seed, "train-core", config.victim),
                trained_for_user=config.victim, n_jobs=config.threads)
            core_matrix = matrix_correlations(core_data, positive_only=True)
            core_attacker = build_treadmill_attacker(
                core_model, core_data.X[core_data.y == 1],
                attacker_rows[:, [list(fm.schema).index(f) for f in core]],
                core_matrix, config.group_threshold, config.k_groups,
                config.jitter_frac, config.attacker)
            core_report = treadmill_eval(
                core_model, core_attacker, config.n_trials, config.seed,
                None, config.decision_threshold, label + "/uncorrelated-core")
            doc["defended_report"] = core_report.to_dict()
            doc["defended_core"] = [f.render() for f in core]
    else:
        raise ConfigError(f"unknown attack kind {config.attack_kind!r}")

    out = _out_dir(config) / f"attack-{config.attack_kind}.json"
    _write_report(out, doc)
    print(f"wrote {out} (attacker_fpr={doc['report']['attacker_fpr']:.3f})")
    return 0


def cmd_simulate(config: ExperimentConfig) -> int:
    if not config.scenario or not config.model:
        raise ConfigError("--scenario and --model are required for simulate")
    scenario = load_scenario(config.scenario)
    models = {"gate": load_model(config.model)}
    if config.fallback_model:
        models["fallback"] = load_model(config.fallback_model)
    corpus = load_corpus(config.corpus) if config.corpus else None
    transcript = run_simulation(scenario, corpus, models, config.seed)
    transcript.meta["config_hash"] = config.config_hash()
    out = _out_dir(config) / "transcript.jsonl"
    write_transcript(transcript, out)
    final = transcript.final_state()
    print(f"wrote {out} (final state: {final['state']}, "
          f"reason: {final['lock_reason']})")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None,
                   help="JSON file with ExperimentConfig fields")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--device-mode", dest="device_mode",
                   choices=("phone", "watch", "both"), default=None)
    p.add_argument("--category",
                   choices=("overall", "general", "individual"), default=None)
    p.add_argument("--threads", type=int, default=None)


def _forest_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--k", type=int, default=None, help="cross-validation folds")
    p.add_argument("--n-trees", dest="n_trees", type=int, default=None)
    p.add_argument("--max-depth", dest="max_depth", type=int, default=None)
    p.add_argument("--min-leaf", dest="min_leaf", type=int, default=None)
    p.add_argument("--features-per-split", dest="features_per_split",
                   type=int, default=None)
    p.add_argument("--no-bootstrap", dest="bootstrap", action="store_const",
                   const=False, default=None)
    p.add_argument("--decision-threshold", dest="decision_threshold",
                   type=float, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gaitlock",
        description="walk-biometric gating for zero-interaction authentication")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    _common_flags(p)
    p.add_argument("--users", type=int, default=None)
    p.add_argument("--sessions", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("extract", help="export the feature matrix CSV")
    _common_flags(p)
    p.add_argument("--corpus", default=None)
    p.add_argument("--policy", choices=("strict", "zero_fill"), default=None)
    p.add_argument("--positive-user", dest="positive_user", default=None)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="train one user's classifier")
    _common_flags(p)
    _forest_flags(p)
    p.add_argument("--corpus", default=None)
    p.add_argument("--user", default=None)
    p.add_argument("--sensors", default=None,
                   help="explicit subset, e.g. phone:accelerometer+gyroscope|watch:-")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="per-user cross-validated metrics table")
    _common_flags(p)
    _forest_flags(p)
    p.add_argument("--corpus", default=None)
    p.add_argument("--sensors", default=None,
                   help="subset for --category general")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("subsets", help="sensor-subset search")
    _common_flags(p)
    _forest_flags(p)
    p.add_argument("--corpus", default=None)
    p.add_argument("--user", default=None,
                   help="search for this user; omit for the general subset")
    p.add_argument("--subset-mode", dest="subset_mode",
                   choices=("per_device_exhaustive", "combined_greedy",
                            "combined_exhaustive"), default=None)
    p.add_argument("--subset-device", dest="subset_device",
                   choices=("phone", "watch"), default=None)
    p.set_defaults(func=cmd_subsets)

    p = sub.add_parser("corr", help="export a correlation heatmap CSV")
    _common_flags(p)
    p.add_argument("--corpus", default=None)
    p.add_argument("--user", default=None)
    p.set_defaults(func=cmd_corr)

    p = sub.add_parser("attack", help="imposter or treadmill attack evaluation")
    _common_flags(p)
    _forest_flags(p)
    p.add_argument("--corpus", default=None)
    p.add_argument("--kind", dest="attack_kind",
                   choices=("imposter", "treadmill"), default=None)
    p.add_argument("--victim", default=None)
    p.add_argument("--attacker", default=None)
    p.add_argument("--strength", type=float, default=None)
    p.add_argument("--imitate", choices=("phone", "watch", "both"),
                   default=None)
    p.add_argument("--attempts", type=int, default=None)
    p.add_argument("--k-groups", dest="k_groups", type=int, default=None)
    p.add_argument("--n-trials", dest="n_trials", type=int, default=None)
    p.add_argument("--jitter-frac", dest="jitter_frac", type=float,
                   default=None)
    p.add_argument("--corr-threshold", dest="corr_threshold", type=float,
                   default=None, help="uncorrelated-core bound (default 0.1)")
    p.add_argument("--group-threshold", dest="group_threshold", type=float,
                   default=None,
                   help="characteristic-cluster bound (default 0.5)")
    p.add_argument("--sensors", default=None)
    p.add_argument("--defended", action="store_const", const=True,
                   default=None, help="also evaluate the uncorrelated core")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("simulate", help="run a protocol scenario script")
    _common_flags(p)
    p.add_argument("--scenario", default=None)
    p.add_argument("--corpus", default=None)
    p.add_argument("--model", default=None, help="gate model JSON path")
    p.add_argument("--fallback-model", dest="fallback_model", default=None)
    p.set_defaults(func=cmd_simulate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = _merge_config(args)
        return args.func(config)
    except GaitlockError as exc:
        error = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(error, sort_keys=True), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
