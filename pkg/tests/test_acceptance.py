"""Acceptance criteria, each run at its stated tolerance.

Every test logs one PASS/FAIL line (collected in the terminal summary) and
then asserts.  Extra INFO lines report ablations; they never gate anything.
"""

import itertools
import time

import numpy as np
import pytest
from scipy import stats
from scipy.stats import ortho_group

from diep import harness, io
from diep.autodiff import finite_diff
from diep.cka import cka, expert_similarity, gram, hsic
from diep.data import (
    RedundancyEntry,
    RedundancySpec,
    TaskSpec,
    TokenSet,
    accuracy,
    gen_task,
    init_model,
    plant_redundancy,
    pretrain_toy,
    redundant_pruned_count,
)
from diep.moe import ModelConfig, MoEModel, PruneMask, PruneParams, model_forward
from diep.pruning import (
    ScoreTable,
    exhaustive_layer_search,
    frequency_prune,
    global_scores,
    max_feasible,
    n_to_prune,
    random_prune,
    select_bottom_k,
)
from diep.search import SearchConfig, block_gradient, full_batch_descent, run_search
from diep.skipping import SkipThresholds, calibrate, skip_forward

from conftest import record_criterion
from test_cka import hsic_double_sum
from test_moe import ref_layer
from test_pruning import floor_oracle
from test_search import ref_objective

N_SEEDS = 20
SPEC = TaskSpec(n_domains=4, vocab=64, classes=4)
CONFIG = ModelConfig(n_layers=4, n_experts=6, top_k=2, d_model=16, vocab=64, classes=4)
# ablation setting reported alongside (not instead of) the default search
ABLATION = dict(lr_alpha=0.5, lr_beta=0.5, router_weighted=True)


def _pretrained(redundancy_for_seed):
    out = []
    for seed in range(N_SEEDS):
        train, evaluation, calib = gen_task(SPEC, seed)
        red, extra = redundancy_for_seed(seed)
        model = plant_redundancy(init_model(CONFIG, SPEC, seed), red, seed)
        out.append((pretrain_toy(model, train, epochs=30, seed=seed).model, evaluation, calib, extra))
    return out


@pytest.fixture(scope="module")
def planted():
    """Clones of expert 0 in layers 1 and 2, two per layer (4 clones in total)."""
    red = RedundancySpec((RedundancyEntry(1, 0, 2), RedundancyEntry(2, 0, 2)))
    return _pretrained(lambda seed: (red, None))


@pytest.fixture(scope="module")
def heterogeneous():
    """Three clones in layer A, none in layer B; A and B alternate between layers 1 and 2."""
    def spec(seed):
        A, B = (1, 2) if seed % 2 == 0 else (2, 1)
        return RedundancySpec((RedundancyEntry(A, 0, 3),)), (A, B)
    return _pretrained(spec)


def _search(entries, **overrides):
    return [run_search(m, cal, SearchConfig(seed=seed, **overrides))[0]
            for seed, (m, _, cal, _) in enumerate(entries)]


@pytest.fixture(scope="module")
def planted_scores(planted):
    return {"default": _search(planted), "ablation": _search(planted, **ABLATION)}


def _fidelity(model, evaluation, mask):
    full = model_forward(evaluation.tokens, model)
    return float(np.linalg.norm(model_forward(evaluation.tokens, model, "masked", mask=mask) - full))


def _acc(model, evaluation, mask):
    return accuracy(model_forward(evaluation.tokens, model, "masked", mask=mask), evaluation.targets)


# -- 1 ---------------------------------------------------------------------

def test_criterion_01_gradient_correctness():
    started = time.perf_counter()
    worst, n = 0.0, 0
    for (L, N, d), seed in itertools.product(itertools.product((2, 3), (3, 4), (4, 8)), range(3)):
        rng = np.random.default_rng([L, N, d, seed])
        model = MoEModel.init(ModelConfig(L, N, 2, d, 10, 3), seed)
        data = TokenSet(rng.integers(0, 10, size=(2, 4)), rng.integers(0, 3, size=(2, 4)))
        params = PruneParams(rng.normal(size=(L, N)), rng.normal(1.0, 0.3, size=L))
        for block in ("alpha", "beta"):
            _, g, _ = block_gradient(model, data.tokens, data.targets, params, 0.01, block)

            def f(theta):
                p = PruneParams(theta, params.beta) if block == "alpha" else PruneParams(params.alpha, theta)
                return ref_objective(model, data, p, 0.01)

            num = finite_diff(f, params.alpha if block == "alpha" else params.beta)
            worst = max(worst, float(np.max(np.abs(g - num)) / max(np.max(np.abs(num)), 1e-12)))
        n += 1
    elapsed = time.perf_counter() - started
    ok = n >= 20 and worst <= 1e-5 and elapsed < 60
    record_criterion(1, ok, f"{n} configs, worst relative error {worst:.2e} (<= 1e-5), {elapsed:.1f}s")
    assert ok


# -- 2 and 3 ---------------------------------------------------------------

@pytest.fixture(scope="module")
def descent_runs():
    started = time.perf_counter()
    runs = []
    for seed in range(10):
        rng = np.random.default_rng(seed)
        model = MoEModel.init(ModelConfig(1, 3, 2, 4, 8, 3), seed)
        data = TokenSet(rng.integers(0, 8, size=(4, 8)), rng.integers(0, 3, size=(4, 8)))
        runs.append(full_batch_descent(model, data, lam=0.01, iterations=200, seed=seed))
    return runs, time.perf_counter() - started


def test_criterion_02_descent(descent_runs):
    runs, elapsed = descent_runs
    increases = [r[2].violations for r in runs]
    iterations = min(len(r[1].kinds) // 2 for r in runs)
    ok = all(v == 0 for v in increases) and iterations >= 200 and elapsed < 120
    record_criterion(2, ok, f"single-layer model, 10 seeds x {iterations} iterations, loss increases per seed "
                            f"{increases}, {elapsed:.1f}s")
    assert ok


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_criterion_02_info_deeper_models():
    """Two layers: reported only; ReLU kinks make the objective non-smooth in alpha/beta."""
    bad = []
    for seed in range(3):
        rng = np.random.default_rng(seed)
        model = MoEModel.init(ModelConfig(2, 3, 2, 4, 8, 3), seed)
        data = TokenSet(rng.integers(0, 8, size=(4, 8)), rng.integers(0, 3, size=(4, 8)))
        bad.append(full_batch_descent(model, data, lam=0.01, iterations=200, seed=seed)[2].violations)
    record_criterion("2b", "INFO", f"two-layer models, loss increases per seed {bad} (not gated)")


def test_criterion_03_vanishing_updates(descent_runs):
    runs, _ = descent_runs
    a = [r[2].alpha_ratio for r in runs]
    b = [r[2].beta_ratio for r in runs]
    ok = max(a) < 0.1 and max(b) < 0.1
    record_criterion(3, ok, f"last/first epoch mean step norm: alpha max {max(a):.3f}, beta max {max(b):.3f} (< 0.1)")
    assert ok


# -- 4 ---------------------------------------------------------------------

def test_criterion_04_global_pruning_oracle():
    started = time.perf_counter()
    rng = np.random.default_rng(4)
    checked = mismatches = 0
    for t in range(100):
        L, N = int(rng.integers(1, 5)), int(rng.integers(2, 7))
        k = int(rng.integers(1, N + 1))
        if t % 2:
            scores = rng.choice([0.0, 0.1, 0.5, 1.0], size=(L, N))  # heavy ties
        else:
            scores = rng.normal(size=(L, N))
            scores[rng.integers(0, L), :] = scores[0, 0]
        for K in range(max_feasible(L, N, k) + 1):
            r = K / (L * N)
            d = select_bottom_k(ScoreTable(scores, "raw"), r, k)
            checked += 1
            mismatches += d.pruned != floor_oracle(scores, n_to_prune(L, N, r), k)
    elapsed = time.perf_counter() - started
    ok = mismatches == 0 and elapsed < 10
    record_criterion(4, ok, f"100 tables, {checked} (table, r) cases, {mismatches} mismatches, {elapsed:.1f}s")
    assert ok


# -- 5 ---------------------------------------------------------------------

def test_criterion_05_exhaustive_oracle():
    started = time.perf_counter()
    model = MoEModel.init(ModelConfig(3, 4, 2, 6, 12, 3), 5)
    tokens = np.random.default_rng(5).integers(0, 12, size=24)
    d = exhaustive_layer_search(model, tokens, keep=2)
    x = model.embedding[tokens]
    same = True
    for l in range(3):
        ref = ref_layer(x, l, model)
        errs = {}
        for keep in itertools.combinations(range(4), 2):
            avail = np.zeros(4, dtype=bool)
            avail[list(keep)] = True
            errs[keep] = float(np.linalg.norm(ref_layer(x, l, model, available=avail) - ref))
        best = min(errs, key=lambda s: (errs[s], s))
        same &= d.mask.mask[l].nonzero()[0].tolist() == list(best)
        same &= sorted(tuple(e["keep"]) for e in d.details["errors"][l]) == sorted(errs)
        x = ref
    elapsed = time.perf_counter() - started
    ok = d.details["evaluations"] == [6, 6, 6] and same and elapsed < 30
    record_criterion(5, ok, f"evaluations per layer {d.details['evaluations']}, selections match re-enumeration: "
                            f"{same}, {elapsed:.1f}s")
    assert ok


# -- 6 ---------------------------------------------------------------------

def _recovery(planted, params_list):
    K = 4
    diep, rand, fid_wins = [], [], 0
    for seed, ((model, evaluation, _, _), params) in enumerate(zip(planted, params_list)):
        dec = select_bottom_k(global_scores(params), K / 24, 2)
        rnd = random_prune(4, 6, K, 2, seed)
        diep.append(redundant_pruned_count(model.clone_groups, dec.pruned) / K)
        rand.append(redundant_pruned_count(model.clone_groups, rnd.pruned) / K)
        fid_wins += _fidelity(model, evaluation, dec.mask) <= _fidelity(model, evaluation, rnd.mask)
    diep, rand = np.array(diep), np.array(rand)
    p = stats.wilcoxon(diep, rand, alternative="greater").pvalue if np.any(diep != rand) else 1.0
    return diep.mean(), rand.mean(), p, fid_wins


def test_criterion_06_planted_recovery(planted, planted_scores):
    d, r, p, wins = _recovery(planted, planted_scores["ablation"])
    record_criterion("6b", "INFO", f"router-weighted ablation (lr 0.5): clone fraction {d:.3f} vs random {r:.3f}, "
                                   f"p={p:.4f}, fidelity <= random in {wins}/{N_SEEDS}")
    d, r, p, wins = _recovery(planted, planted_scores["default"])
    ok = d > r and p < 0.05 and wins >= 0.9 * N_SEEDS
    record_criterion(6, ok, f"default search: clone fraction {d:.3f} vs random {r:.3f}, one-sided Wilcoxon "
                            f"p={p:.4f} (< 0.05), fidelity <= random in {wins}/{N_SEEDS} (>= 18)")
    assert ok


# -- 7 ---------------------------------------------------------------------

def test_criterion_07_nonuniform_allocation(heterogeneous):
    def wins(params_list):
        out = []
        for (model, _, _, (A, B)), params in zip(heterogeneous, params_list):
            ret = select_bottom_k(global_scores(params), 3 / 24, 2).retained
            out.append(ret[A] < ret[B])
        return sum(out)

    ablation = wins(_search(heterogeneous, **ABLATION))
    record_criterion("7b", "INFO", f"router-weighted ablation: layer A retains fewer in {ablation}/{N_SEEDS}")
    default = wins(_search(heterogeneous))
    ok = default >= 0.8 * N_SEEDS
    record_criterion(7, ok, f"default search: layer A retains fewer than B in {default}/{N_SEEDS} (>= 16)")
    assert ok


# -- 8 ---------------------------------------------------------------------

def _ordering(planted, params_list):
    lines, ok = [], True
    for r in (0.25, 0.5):
        K = n_to_prune(4, 6, r)
        rows = []
        for seed, ((model, evaluation, calib, _), params) in enumerate(zip(planted, params_list)):
            rows.append((
                _acc(model, evaluation, select_bottom_k(global_scores(params), r, 2).mask),
                _acc(model, evaluation, frequency_prune(model, calib, K).mask),
                _acc(model, evaluation, random_prune(4, 6, K, 2, seed).mask),
            ))
        a = np.array(rows)
        mean = a.mean(axis=0)

        def geq(i, j):
            diff = a[:, i] - a[:, j]
            return diff.mean() >= -diff.std(ddof=1) / np.sqrt(len(diff))

        good = geq(0, 1) and geq(1, 2)
        ok &= good
        lines.append(f"r={r}: diep {mean[0]:.3f} freq {mean[1]:.3f} random {mean[2]:.3f} ({'ok' if good else 'violated'})")
    return ok, "; ".join(lines)


def test_criterion_08_baseline_ordering(planted, planted_scores):
    ok_ab, text = _ordering(planted, planted_scores["ablation"])
    record_criterion("8b", "INFO", f"router-weighted ablation: {text}")
    ok, text = _ordering(planted, planted_scores["default"])
    record_criterion(8, ok, f"default search, mean accuracy over {N_SEEDS} seeds: {text}")
    assert ok


# -- 9 ---------------------------------------------------------------------

def test_criterion_09_skipping_correctness(planted):
    exact = single = monotone = True
    for model, evaluation, _, _ in planted[:10]:
        tokens = evaluation.tokens.reshape(-1)
        mask = PruneMask.from_pruned(4, 6, [(1, 1), (2, 2), (3, 5)])
        logits, _ = skip_forward(tokens, model, mask, SkipThresholds.fixed(0.0, 4))
        exact &= np.array_equal(logits, model_forward(tokens, model, "masked", mask=mask))
        _, s1 = skip_forward(tokens, model, mask, SkipThresholds.fixed(1.0, 4))
        single &= s1.experts_per_token == 1.0
        counts = [int(skip_forward(tokens, model, mask, SkipThresholds.fixed(g, 4))[1].skipped.sum())
                  for g in np.linspace(0.0, 1.0, 5)]
        monotone &= counts == sorted(counts)
    ok = exact and single and monotone
    record_criterion(9, ok, f"10 models: gamma=0 bit-equal {exact}, gamma=1 one expert/token {single}, "
                            f"total skip count monotone over 5-point sweep {monotone}")
    assert ok


# -- 10 --------------------------------------------------------------------

def _skip_efficiency(planted, **kw):
    ept, drops = [], []
    for model, evaluation, calib, _ in planted[:10]:
        th = calibrate(model, None, calib, mode=kw.get("mode", "routed"))
        tokens, targets = evaluation.tokens.reshape(-1), evaluation.targets.reshape(-1)
        logits, st = skip_forward(tokens, model, None, th, post_skip_weight=kw.get("post_skip_weight", "one"))
        base = model_forward(tokens, model)
        ept.append(st.experts_per_token)
        drops.append(100 * (accuracy(base, targets) - accuracy(logits, targets)))
    return float(np.mean(ept)), float(np.mean(drops))


def test_criterion_10_skipping_efficiency(planted):
    for mode, psw in (("routed", "renormalized"), ("batch", "one"), ("batch", "renormalized")):
        e, d = _skip_efficiency(planted, mode=mode, post_skip_weight=psw)
        record_criterion("10b", "INFO", f"gamma2 {mode}, post-skip weight {psw}: experts/token {e:.3f}, "
                                        f"accuracy drop {d:.2f} points")
    ept, drop = _skip_efficiency(planted)
    ok = ept <= 1.9 and drop <= 2.0
    record_criterion(10, ok, f"defaults over 10 seeds: experts/token {ept:.3f} (<= 1.9), "
                             f"accuracy drop {drop:.2f} points (<= 2)")
    assert ok


# -- 11 --------------------------------------------------------------------

def test_criterion_11_cka_suite():
    rng = np.random.default_rng(11)
    X, Y = rng.normal(size=(20, 5)), rng.normal(size=(20, 4))
    self_err = max(abs(cka(X, X, k) - 1.0) for k in ("linear", "rbf"))
    sym_err = max(abs(cka(X, Y, k) - cka(Y, X, k)) for k in ("linear", "rbf"))
    Q = ortho_group.rvs(5, random_state=11)
    orth_err = abs(cka(X @ Q, Y) - cka(X, Y))
    hsic_err = 0.0
    for n in range(2, 7):
        K, L = gram(rng.normal(size=(n, 3))), gram(rng.normal(size=(n, 2)))
        hsic_err = max(hsic_err, abs(hsic(K, L) - hsic_double_sum(K, L)))
    model = plant_redundancy(MoEModel.init(ModelConfig(2, 4, 2, 6, 10, 3), 0), RedundancySpec((RedundancyEntry(0, 1, 1),)))
    tokens = rng.integers(0, 10, size=30)
    clone_err = max(abs(expert_similarity(model, 0, tokens, k).matrix[1, 0] - 1.0) for k in ("linear", "rbf"))
    ok = self_err <= 1e-9 and sym_err <= 1e-12 and orth_err <= 1e-9 and hsic_err <= 1e-12 and clone_err <= 1e-9
    record_criterion(11, ok, f"self {self_err:.1e}, symmetry {sym_err:.1e}, orthogonal {orth_err:.1e}, "
                             f"HSIC double sum {hsic_err:.1e}, clone {clone_err:.1e}")
    assert ok


# -- 12 --------------------------------------------------------------------

def test_criterion_12_reproducibility(tmp_path):
    cfg = harness.ExperimentConfig.from_dict({
        "model": {"n_layers": 3, "n_experts": 4, "d_model": 8},
        "task": {"n_domains": 2, "vocab": 16, "classes": 3, "seq_len": 6, "n_train": 64, "n_eval": 32,
                 "n_calibration": 16},
        "redundancy": {"entries": [{"layer": 1, "source": 0, "clones": 1}]},
        "pretrain": {"epochs": 3},
        "search": {"epochs": 2},
        "skipping": {"enabled": True},
        "seeds": {"task": 3, "init": 4, "search": 5, "baseline": 6},
    })
    reports = {
        "pretrain_report.json": harness.cmd_pretrain(cfg, out_dir=tmp_path),
        "prune_report.json": harness.cmd_prune(cfg, out_dir=tmp_path),
        "skip_report.json": harness.cmd_skip_calibrate(cfg, out_dir=tmp_path),
    }
    reports["eval_report.json"] = harness.cmd_eval(cfg, mask_path=tmp_path / "prune_report.json", out_dir=tmp_path)
    reports["analyze_report.json"] = harness.cmd_analyze(cfg, out_dir=tmp_path, kernel="linear")
    diffs = {}
    for name in reports:
        saved = io.load_report(tmp_path / name)
        io.save_report(harness.reproduce(saved), tmp_path / f"again_{name}")
        diffs[name] = io.diff_reports(saved, io.load_report(tmp_path / f"again_{name}"))
    ok = all(not d for d in diffs.values())
    record_criterion(12, ok, "regenerated " + ", ".join(f"{k.split('_')[0]}: {len(v)} differing fields"
                                                        for k, v in diffs.items()))
    assert ok
