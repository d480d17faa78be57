"""Acceptance suite: one test per exit criterion, one PASS line each.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
lines. Tolerances are pinned here and nowhere else.
"""

import itertools
import json
import math

import numpy as np
import pytest

from gaitlock.attacks import build_treadmill_attacker, imposter_eval, treadmill_eval
from gaitlock.cli import main as cli_main
from gaitlock.corpus import (
    Corpus,
    Provenance,
    synth_corpus,
    synth_imitator,
    synth_profile,
    synth_session,
)
from gaitlock.experiment import corpus_schema, evaluate_users, user_matrix_from
from gaitlock.features import extract, extract_matrix
from gaitlock.forest import (
    ForestParams,
    LabeledMatrix,
    feature_importance,
    metrics,
    train,
)
from gaitlock.model import (
    DeviceKind,
    SensorKind,
    canonical_schema,
    schema_for_mode,
)
from gaitlock.selection import (
    CorrelationMatrix,
    correlation,
    matrix_correlations,
    uncorrelated_subset,
)
from gaitlock.simulate import run_simulation


def _pass(n: int, message: str) -> None:
    print(f"\nPASS criterion {n}: {message}")


# -- 1 -----------------------------------------------------------------------

def test_criterion_01_feature_counts():
    both = schema_for_mode("both")
    assert len(both) == 336
    assert both == sorted(both)
    assert len(set(both)) == 336
    assert both[0].render() == "phone.accelerometer.x.mean"
    assert len(schema_for_mode("phone")) == 168
    assert len(schema_for_mode("watch")) == 168
    one = canonical_schema([DeviceKind.PHONE],
                           {DeviceKind.PHONE: [SensorKind.GYROSCOPE]})
    assert len(one) == 21
    _pass(1, "336/168/21 features in canonical order")


# -- 2 -----------------------------------------------------------------------

def test_criterion_02_metrics_oracle():
    rng = np.random.default_rng(2024)
    for _ in range(200):
        n = int(rng.integers(1, 60))
        truth = rng.integers(0, 2, size=n).astype(bool)
        pred = rng.integers(0, 2, size=n).astype(bool)
        tp = tn = fp = fn = 0
        for t, p in zip(truth, pred):  # brute-force confusion counting
            if t and p:
                tp += 1
            elif t and not p:
                fn += 1
            elif not t and p:
                fp += 1
            else:
                tn += 1
        r = metrics(tp, tn, fp, fn)
        if tp + fp:
            assert abs(r.precision - tp / (tp + fp)) < 1e-12
        if tp + fn:
            assert abs(r.recall - tp / (tp + fn)) < 1e-12
            assert abs(r.fnr - fn / (fn + tp)) < 1e-12
        if fp + tn:
            assert abs(r.fpr - fp / (fp + tn)) < 1e-12
        if r.precision + r.recall:
            assert abs(r.f_measure - 2 * r.precision * r.recall
                       / (r.precision + r.recall)) < 1e-12
    _pass(2, "metrics match brute-force confusion counting on 200 vectors")


# -- 3 -----------------------------------------------------------------------

def _two_pass_pearson(x, y):
    dx = x - x.mean()
    dy = y - y.mean()
    denom = math.sqrt(float(dx @ dx) * float(dy @ dy))
    return None if denom == 0 else float(dx @ dy) / denom


def test_criterion_03_correlation_oracle():
    rng = np.random.default_rng(3)
    for i in range(100):
        n = int(rng.integers(3, 1001))
        x = rng.normal(scale=rng.uniform(0.3, 4.0), size=n)
        if i % 10 == 0:  # exact-sign cases
            a = float(rng.uniform(0.5, 3.0))
            y = (a if i % 20 == 0 else -a) * x + float(rng.uniform(-2, 2))
            expect = 1.0 if i % 20 == 0 else -1.0
            assert abs(correlation(x, y) - expect) < 1e-9
        else:
            y = rng.normal(scale=rng.uniform(0.3, 4.0), size=n)
        assert abs(correlation(x, y) - _two_pass_pearson(x, y)) < 1e-9
    _pass(3, "sum-of-products correlation matches two-pass Pearson, 1e-9")


# -- 4 -----------------------------------------------------------------------

def _brute_force_threshold(values, labels):
    order = np.argsort(values, kind="stable")
    sv = np.asarray(values, dtype=float)[order]
    sy = np.asarray(labels)[order]
    n = len(sv)
    best = None
    for cut in range(n - 1):
        lo, hi = sv[cut], sv[cut + 1]
        if not lo < hi:
            continue
        n_l, n_r = cut + 1, n - cut - 1
        p_l = float(sy[:cut + 1].sum()) / n_l
        p_r = float(sy[cut + 1:].sum()) / n_r
        gini_l = 1.0 - p_l * p_l - (1.0 - p_l) * (1.0 - p_l)
        gini_r = 1.0 - p_r * p_r - (1.0 - p_r) * (1.0 - p_r)
        w = (n_l * gini_l + n_r * gini_r) / n
        thr = (lo + hi) / 2.0
        if not lo <= thr < hi:
            thr = lo
        if best is None or w < best[1] or (w == best[1] and thr < best[0]):
            best = (thr, w)
    return best


def test_criterion_04_tree_split_oracle():
    schema = tuple(schema_for_mode("phone")[:1])
    params = ForestParams(n_trees=1, max_depth=1, features_per_split=1,
                          bootstrap=False)
    rng = np.random.default_rng(4)
    pool = np.array([0.0, 0.125, 0.25, 0.5, 1.0, 1.5, 2.0, 3.0, 7.5])
    cases = 0
    while cases < 500:
        n = int(rng.integers(2, 9))
        values = (pool[rng.integers(0, len(pool), size=n)]
                  if rng.random() < 0.5 else rng.normal(size=n))
        labels = rng.integers(0, 2, size=n)
        if labels.min() == labels.max():
            labels[int(rng.integers(n))] ^= 1
        data = LabeledMatrix(schema, values[:, None],
                             labels.astype(np.int8))
        tree = train(data, params, 0).trees[0]
        oracle = _brute_force_threshold(values, labels)
        if oracle is None:
            assert tree.feature[0] == -1
        else:
            assert tree.feature[0] == 0
            assert tree.threshold[0] == oracle[0]
        cases += 1
    _pass(4, "depth-1 thresholds equal brute-force Gini minima, 500 cases")


# -- 5 -----------------------------------------------------------------------

def test_criterion_05_benign_reproduction():
    corpus = synth_corpus(55, 10, 50)
    params = ForestParams()  # defaults: 100 trees, sqrt features
    mean_f = {}
    for mode in ("phone", "watch", "both"):
        summary = evaluate_users(corpus, mode, "overall", 10, params, 55)
        mean_f[mode] = summary.cells["f_measure"][0]
    assert mean_f["both"] >= 0.95, mean_f
    assert mean_f["both"] >= max(mean_f["phone"], mean_f["watch"]) - 0.02
    _pass(5, f"10x50 benign run: mean F both={mean_f['both']:.3f}, "
             f"phone={mean_f['phone']:.3f}, watch={mean_f['watch']:.3f}; "
             "fusion dominates")


# -- 6 -----------------------------------------------------------------------

def _imposter_corpus(seed, sessions=20):
    """Victim plus a decoy sharing the victim's phone motion (so phone
    features alone cannot isolate the victim) plus two fillers."""
    victim = synth_profile(seed, "victim")
    decoy = synth_imitator(victim, synth_profile(seed, "decoy"), 1.0,
                           (DeviceKind.PHONE,))
    out = []
    for p in (victim, decoy, synth_profile(seed, "u1"),
              synth_profile(seed, "u2")):
        out += [synth_session(p, i, seed) for i in range(sessions)]
    return Corpus(out, Provenance.SYNTHETIC, seed), victim


def test_criterion_06_imposter_harness():
    from gaitlock.selection import sensor_subset_search

    params = ForestParams(n_trees=15)
    both_fprs, phone_fprs = [], []
    for seed in range(10):
        corpus, victim = _imposter_corpus(seed)
        imitator = synth_imitator(victim, synth_profile(seed, "attacker"),
                                  1.0, (DeviceKind.PHONE,))
        attacks = [synth_session(imitator, 100 + i, seed) for i in range(12)]

        fm = extract_matrix(corpus, corpus_schema(corpus, "both"))
        data = user_matrix_from(fm, "victim", seed)
        for devices, sink in ((None, both_fprs),
                              ({DeviceKind.PHONE}, phone_fprs)):
            top = sensor_subset_search(corpus, "victim", "combined_greedy",
                                       5, params, seed, devices=devices)[0]
            model = train(data.restrict(top.subset.schema()), params, seed,
                          trained_for_user="victim")
            report = imposter_eval(model, attacks, top.report)
            sink.append(report.attacker_fpr)
    mean_both = float(np.mean(both_fprs))
    mean_phone = float(np.mean(phone_fprs))
    assert mean_both <= 0.2, (both_fprs, phone_fprs)
    assert mean_phone >= 0.5, (both_fprs, phone_fprs)
    _pass(6, f"phone-matching imitator: attacker FPR both={mean_both:.3f} "
             f"(<= 0.2) vs phone-only={mean_phone:.3f} (>= 0.5), 10 seeds")


# -- 7 -----------------------------------------------------------------------

def test_criterion_07_uncorrelated_subset_contract():
    schema = tuple(schema_for_mode("both"))
    rng = np.random.default_rng(7)
    for case in range(50):
        d = int(rng.integers(6, 13))
        sigma = np.eye(d)
        for i, j in itertools.combinations(range(d), 2):
            sigma[i, j] = sigma[j, i] = float(rng.uniform(-1, 1))
        cm = CorrelationMatrix(schema[:d], sigma)
        importance = {schema[i]: float(rng.uniform()) for i in range(d)}

        greedy = uncorrelated_subset(cm, 0.1, importance, mode="greedy")
        g_idx = [schema.index(f) for f in greedy]
        for a, b in itertools.combinations(g_idx, 2):
            assert abs(sigma[a, b]) < 0.1  # the bound, exactly as stated
        for other in set(range(d)) - set(g_idx):  # maximality
            assert any(abs(sigma[other, a]) >= 0.1 for a in g_idx)

        exact = uncorrelated_subset(cm, 0.1, importance, mode="exact")
        e_idx = [schema.index(f) for f in exact]
        for a, b in itertools.combinations(e_idx, 2):
            assert abs(sigma[a, b]) < 0.1
        best = 0  # 2^d brute force
        for r in range(1, d + 1):
            for combo in itertools.combinations(range(d), r):
                if all(abs(sigma[a, b]) < 0.1
                       for a, b in itertools.combinations(combo, 2)):
                    best = max(best, r)
        assert len(exact) == best
    _pass(7, "pairwise bound exact, greedy maximal, exact = 2^n brute force")


# -- 8 -----------------------------------------------------------------------

def _defense_setup(seed, params):
    """Hard victim corpus: negatives are 0.95-strength imitators, so no
    single feature separates and trees must cross several features."""
    victim = synth_profile(seed, "victim")
    profiles = [victim] + [
        synth_imitator(victim, synth_profile(seed, n), 0.95)
        for n in ("u1", "u2", "u3")]
    sessions = []
    for p in profiles:
        sessions += [synth_session(p, i, seed) for i in range(150)]
    corpus = Corpus(sessions, Provenance.SYNTHETIC, seed)
    schema = tuple(corpus_schema(corpus, "both"))
    fm = extract_matrix(corpus, schema)
    data = user_matrix_from(fm, "victim", seed)
    model = train(data, params, seed, trained_for_user="victim")
    cm = matrix_correlations(data, positive_only=True)
    attacker = synth_profile(seed, "attacker")
    atk_rows = np.stack([
        extract(synth_session(attacker, 900 + i, seed), schema).values
        for i in range(40)])
    return schema, data, model, cm, atk_rows


def test_criterion_08_treadmill_defense():
    # features_per_split=1 spreads split mass uniformly over features, so
    # acceptance tracks the fraction of characteristics under control
    # rather than the single most important feature
    params = ForestParams(n_trees=40, features_per_split=1)
    wins = 0
    ks = (0, 1, 2, 4)
    by_k = {k: [] for k in ks}
    core_sizes = []
    for seed in range(20):
        schema, data, model, cm, atk_rows = _defense_setup(300 + seed, params)
        atk = build_treadmill_attacker(model, data.X[data.y == 1], atk_rows,
                                       cm, 0.5, k=4)
        fpr_all = treadmill_eval(model, atk, 60, seed).attacker_fpr
        for k in ks:
            atk.k = min(k, len(atk.groups))
            by_k[k].append(treadmill_eval(model, atk, 60, seed).attacker_fpr)

        importance = feature_importance(model).per_feature
        core = uncorrelated_subset(cm, 0.1, importance, mode="greedy")
        core_sizes.append(len(core))
        core_data = data.restrict(core)
        core_model = train(core_data, params, seed, trained_for_user="victim")
        core_cm = matrix_correlations(core_data, positive_only=True)
        core_rows = atk_rows[:, [list(schema).index(f) for f in core]]
        core_atk = build_treadmill_attacker(
            core_model, core_data.X[core_data.y == 1], core_rows, core_cm,
            0.5, k=min(4, len(core)))
        fpr_core = treadmill_eval(core_model, core_atk, 60, seed).attacker_fpr
        if fpr_core <= fpr_all:
            wins += 1
    assert wins >= 18, wins
    assert float(np.median(core_sizes)) >= 8, core_sizes
    means = {k: float(np.mean(by_k[k])) for k in ks}
    for lo, hi in zip(ks, ks[1:]):  # monotone non-decreasing, 0.02 slack
        assert means[hi] >= means[lo] - 0.02, means
    _pass(8, f"uncorrelated core (median m={int(np.median(core_sizes))}) "
             f"beats all-features in {wins}/20 seeds; mean FPR by k: "
             + ", ".join(f"{k}:{means[k]:.2f}" for k in ks))


# -- 9 -----------------------------------------------------------------------

@pytest.fixture(scope="module")
def fuzz_fixture():
    corpus = synth_corpus(9, 2, 10)
    schema = corpus_schema(corpus, "both")
    fm = extract_matrix(corpus, schema)
    data = user_matrix_from(fm, "user01", 9)
    params = ForestParams(n_trees=9)
    both = train(data, params, 9, trained_for_user="user01")
    phone_schema = corpus_schema(corpus, "phone")
    phone_fm = extract_matrix(corpus, phone_schema)
    phone = train(user_matrix_from(phone_fm, "user01", 9), params, 9,
                  trained_for_user="user01")
    return corpus, {"gate": both, "fallback": phone}


def _fuzz_scenario(rng, corpus):
    genuine = corpus.by_user("user01")
    imposter = corpus.by_user("user02")
    window_kind = rng.choice(["genuine", "imposter", "none", "phone_only"])
    events = []
    if window_kind != "none":
        sid = (genuine if window_kind != "imposter"
               else imposter)[int(rng.integers(5))].session_id
        device = "phone" if window_kind == "phone_only" else "both"
        events.append({"t_ms": int(rng.integers(0, 50)),
                       "kind": "sensor_window", "device": device,
                       "session_id": sid})
    events.append({"t_ms": int(rng.integers(50, 200)), "kind": "proximity"})
    if rng.random() < 0.3:
        events.append({"t_ms": int(rng.integers(300, 9000)),
                       "kind": "replay_response"})
    if rng.random() < 0.4:
        events.append({"t_ms": int(rng.integers(300, 12000)), "kind": "rssi",
                       "value": float(rng.uniform(-95, -40)),
                       "recent_gait": str(rng.choice(
                           ["accept", "reject", "none"]))})
    scenario = {
        "schema_version": 1,
        "verifier_id": "terminal",
        "phone_id": "phone",
        "watch_id": "watch",
        "gate_model": "gate",
        "fallback_policy": str(rng.choice(["refuse", "fallback"])),
        "fallback_model": "fallback" if rng.random() < 0.5 else None,
        "wrong_key": bool(rng.random() < 0.15),
        "wrong_pair_key": bool(rng.random() < 0.1),
        "latency_ms": {"default": int(rng.integers(5, 50))},
        "events": sorted(events, key=lambda e: e["t_ms"]),
    }
    if rng.random() < 0.15:
        scenario["drop"] = [{"link": "phone->terminal", "seq": 0}]
    return scenario


def test_criterion_09_protocol_safety(fuzz_fixture):
    from gaitlock.protocol import SessionState, VState, deauth_step

    corpus, models = fuzz_fixture
    for trial in range(1000):
        rng = np.random.default_rng(10_000 + trial)
        scenario = _fuzz_scenario(rng, corpus)
        tr = run_simulation(scenario, corpus, models, trial)
        final = tr.final_state()

        assert final["unlock_count"] <= 1  # replay cannot double-unlock

        # responses the prover emitted, whether or not the radio lost them
        responses = [e for e in tr.of_kind("frame_sent")
                     + tr.of_kind("frame_dropped") if e["type"] == "response"]
        accepts = [e for e in tr.of_kind("gait_eval")
                   if e["decision"] == "accept"]
        if not accepts:  # gait-reject (or no data): prover stays silent
            assert not responses

        if final["state"] == "unlocked":
            assert not scenario["wrong_key"]
            assert accepts and responses
            unlock = [e for e in tr.of_kind("state")
                      if e.get("state") == "unlocked"][0]
            challenge = tr.of_kind("challenge_sent")[0]
            assert unlock["nonce_b64"] == challenge["nonce_b64"]

        if scenario["wrong_key"]:
            delivered = [e for e in tr.of_kind("frame_delivered")
                         if e["type"] == "response"]
            if delivered:
                assert final["state"] == "locked"
                assert final["lock_reason"] == "bad_auth"

    # departure rule, exhaustively: lock iff weak signal AND gait accept
    for rssi, gait in itertools.product((-90.0, -50.0),
                                        ("accept", "reject", "none")):
        state = SessionState(state=VState.UNLOCKED)
        state, alert = deauth_step(state, rssi, gait, -70.0)
        should_lock = rssi < -70.0 and gait == "accept"
        assert (state.state is VState.LOCKED) == should_lock
        assert alert == (rssi < -70.0 and gait != "accept")
    _pass(9, "1000 fuzzed scenarios uphold unlock/replay/silence/key "
             "invariants; departure truth table exact")


# -- 10 ----------------------------------------------------------------------

def test_criterion_10_determinism(tmp_path):
    out = tmp_path / "det"
    corpus_path = out / "corpus.json"

    def run(*args):
        assert cli_main([str(a) for a in args]) == 0

    artifacts = {}
    for round_no in range(2):
        run("synth", "--users", 3, "--sessions", 5, "--seed", 21, "--out", out)
        run("train", "--corpus", corpus_path, "--user", "user01",
            "--seed", 21, "--n-trees", 7, "--out", out)
        run("eval", "--corpus", corpus_path, "--seed", 21, "--k", 3,
            "--n-trees", 7, "--out", out)
        scenario = {
            "schema_version": 1, "verifier_id": "terminal",
            "phone_id": "phone", "watch_id": "watch", "gate_model": "gate",
            "events": [
                {"t_ms": 0, "kind": "sensor_window", "device": "both",
                 "session_id": "user01-s0000"},
                {"t_ms": 50, "kind": "proximity"},
            ],
        }
        scenario_path = out / "scenario.json"
        scenario_path.write_text(json.dumps(scenario))
        run("simulate", "--scenario", scenario_path, "--corpus", corpus_path,
            "--model", out / "model-user01-both.json", "--seed", 21,
            "--out", out)
        snapshot = {name: (out / name).read_bytes() for name in (
            "corpus.json", "model-user01-both.json",
            "eval-overall-both.json", "transcript.jsonl")}
        if round_no == 0:
            artifacts = snapshot
        else:
            for name, blob in snapshot.items():
                assert blob == artifacts[name], f"{name} differs between runs"
    _pass(10, "corpus, model, report and transcript bytes identical "
              "across reruns")
