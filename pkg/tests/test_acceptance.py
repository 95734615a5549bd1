"""Acceptance criteria 1-9, one pass/fail line each.

Run with ``pytest tests/test_acceptance.py -s`` or ``python3 tests/test_acceptance.py``.
Tolerances, sizes and runtime budgets are pinned below.
"""
import functools
import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from powersgd_sim.cluster import (
    expected_comm_per_iteration,
    expected_comm_total,
    make_rng,
    simplified_comm_per_iteration,
)
from powersgd_sim.compressors import ssp_compress, svd_compress
from powersgd_sim.config import RunConfig
from powersgd_sim.numkernel import frobenius_sq, projector, thin_svd
from powersgd_sim.problems import A, B, C, CounterexampleProblem, QuadraticProblem, epsilon_zero
from powersgd_sim.study import metrics_csv, run_study, run_trials, summarize
from powersgd_sim.trainer import (
    Hyper,
    ef_bound,
    momentum_bound,
    rate_bound_terms,
    simulate,
    theoretical_rate_bound,
    theoretical_step_size,
)

SHAPES = ((4, 3, 1), (8, 5, 2), (16, 16, 4))
PYTHAGORAS_RTOL = 1e-9
SVD_TAIL_RTOL = 1e-8
GRAD_LOCK = 16.0
GRAD_LOCK_ATOL = 1e-6
SPAN_TOL = 1e-8
ETA_GRID = (0.1, 0.05, 0.02)
CE_N, CE_SIGMA, CE_X0 = 4, 1.0, np.eye(2)
L_CE = CounterexampleProblem().metadata.L

BUDGET = {1: 10.0, 2: 10.0, 3: 5.0, 4: 60.0, 5: 300.0, 6: 1.0}

_results = {}
_capture = {"manager": None}


@pytest.fixture(autouse=True)
def _capture_manager(request):
    _capture["manager"] = request.config.pluginmanager.getplugin("capturemanager")
    yield
    _capture["manager"] = None


def emit(line: str) -> None:
    """Print past pytest's output capture so verdict lines show without -s."""
    manager = _capture["manager"]
    if manager is None:
        print(line, flush=True)
        return
    with manager.global_and_fixture_disabled():
        print("\n" + line, flush=True)


def report(num: int, ok: bool, text: str, elapsed: float | None = None) -> None:
    budget = BUDGET.get(num)
    timing = "" if elapsed is None else f" [{elapsed:.2f}s" + (f" / budget {budget:g}s]" if budget else "]")
    line = f"{'PASS' if ok else 'FAIL'} criterion {num}: {text}{timing}"
    _results[num] = ok
    emit(line)


def info(num: int, text: str) -> None:
    emit(f"     criterion {num} (info): {text}")


def eta_cap(mu: float, L: float) -> float:
    return (1 - mu) / (2 * L)


def admissible_etas(mu: float, L: float) -> list[float]:
    """Grid plus the cap itself, keeping only step sizes within the cap."""
    cap = eta_cap(mu, L)
    return sorted({e for e in ETA_GRID if e <= cap} | {cap}, reverse=True)


def _monitor_entry(label, outcomes_or_rows, window, g_sq, delta, mu):
    ef_lim, mom_lim = ef_bound(window, g_sq, delta), momentum_bound(window, g_sq, delta, mu)
    ef_max = mom_max = 0.0
    violations = []
    for k, rows in enumerate(outcomes_or_rows):
        for r in rows:
            ef_max, mom_max = max(ef_max, r.ef_norm_sq), max(mom_max, r.momentum_norm_sq)
            if r.ef_norm_sq > ef_lim or r.momentum_norm_sq > mom_lim:
                violations.append((k, r.step))
    return dict(label=label, ef_max=ef_max, ef_lim=ef_lim, mom_max=mom_max, mom_lim=mom_lim,
                violations=violations)


def test_criterion_1_pythagorean_identity():
    t0 = time.perf_counter()
    rng = make_rng(101)
    worst = 0.0
    for m, n, r in SHAPES:
        for _ in range(1000):
            w = rng.standard_normal((m, n))
            w2 = frobenius_sq(w)
            for approx in (ssp_compress(rng.standard_normal((n, r)), [w], None).global_approx,
                           svd_compress([w], r, None).global_approx):
                resid = abs(frobenius_sq(approx - w) + frobenius_sq(approx) - w2) / w2
                worst = max(worst, resid)
    elapsed = time.perf_counter() - t0
    ok = worst <= PYTHAGORAS_RTOL and elapsed < BUDGET[1]
    report(1, ok, f"max relative Pythagorean residual {worst:.3g} <= {PYTHAGORAS_RTOL:g} "
                  f"(SSP and SVD, 1000 matrices x {len(SHAPES)} shapes)", elapsed)
    assert ok


def test_criterion_2_contraction_bounds():
    t0 = time.perf_counter()
    rng = make_rng(202)
    ssp_norm = ssp_err = svd_ratio = tail_dev = 0.0
    for k in range(1000):
        m, n, r = SHAPES[k % len(SHAPES)]
        w = rng.standard_normal((m, n))
        w2 = frobenius_sq(w)
        c = ssp_compress(rng.standard_normal((n, r)), [w], None).global_approx
        ssp_norm = max(ssp_norm, frobenius_sq(c) / w2)
        ssp_err = max(ssp_err, frobenius_sq(c - w) / w2)
        s = svd_compress([w], r, None).global_approx
        err = frobenius_sq(s - w)
        svd_ratio = max(svd_ratio, err / ((1 - r / n) * w2) if r < n else (0.0 if err <= 1e-24 * w2 else math.inf))
        tail = float(np.sum(thin_svd(w).sigma[r:] ** 2))
        tail_dev = max(tail_dev, abs(err - tail) / max(tail, w2 * 1e-16))
    elapsed = time.perf_counter() - t0
    ok = ssp_norm <= 1 + 1e-12 and ssp_err <= 1 + 1e-12 and svd_ratio <= 1 + 1e-12 \
        and tail_dev <= SVD_TAIL_RTOL and elapsed < BUDGET[2]
    report(2, ok, f"SSP max ||C||^2/||D||^2 {ssp_norm:.6f} <= 1, max ||C-D||^2/||D||^2 {ssp_err:.6f} <= 1; "
                  f"SVD max err/((1-r/n)||D||^2) {svd_ratio:.6f} <= 1, tail-energy rel dev {tail_dev:.2g} "
                  f"<= {SVD_TAIL_RTOL:g}", elapsed)
    assert ok


def _dist(x, basis):
    return float(np.linalg.norm(x - np.sum(x * basis) / np.sum(basis * basis) * basis))


@functools.lru_cache(maxsize=None)
def criterion3_runs():
    """Forced step-0 draws; every step checked against the lock and lock spans."""
    out = []
    for mu in (0.0, 0.9):
        for eta in sorted(set(ETA_GRID) | {eta_cap(mu, L_CE)}, reverse=True):
            for seed in (0, 1, 2):
                stats = dict(grad_dev=0.0, m_span=0.0, e_span=0.0, proj=0.0)

                def check(state, nodes, row, stats=stats):
                    stats["grad_dev"] = max(stats["grad_dev"], abs(row.grad_sq_norm - GRAD_LOCK))
                    m = state.momentum
                    stats["m_span"] = max(stats["m_span"], _dist(m, B) / (1 + np.linalg.norm(m)))
                    for nd in nodes:
                        stats["e_span"] = max(stats["e_span"], _dist(nd.error, A) / (1 + np.linalg.norm(nd.error)))
                    upd = state.last_update
                    if np.any(upd.p_mean != 0):
                        stats["proj"] = max(stats["proj"], float(np.linalg.norm(projector(upd.p_tilde) - projector(C))))

                prob = CounterexampleProblem(CE_SIGMA, x0=CE_X0, force_xi0=True)
                res = simulate(prob, Hyper(eta=eta, mu=mu), "powersgd", CE_N, 200, seed, callback=check)
                out.append(((mu, eta, seed), stats, res.metrics))
    return out


def test_criterion_3_forced_nonconvergence():
    t0 = time.perf_counter()
    runs = criterion3_runs()
    elapsed = time.perf_counter() - t0
    grad_dev = max(s["grad_dev"] for _, s, _ in runs)
    span = max(max(s["m_span"], s["e_span"], s["proj"]) for _, s, _ in runs)
    ok = grad_dev <= GRAD_LOCK_ATOL and span <= SPAN_TOL and elapsed < BUDGET[3]
    report(3, ok, f"{len(runs)} forced runs (mu in {{0, 0.9}}, eta in grid + cap, 3 seeds, T=200): "
                  f"max |grad_sq - 16| {grad_dev:.2g} <= {GRAD_LOCK_ATOL:g}, max span/projector "
                  f"deviation {span:.2g} <= {SPAN_TOL:g}", elapsed)
    assert ok


def _ce_config(schedule, mu, eta, trials, T, tau=1, **kw):
    return RunConfig(problem="counterexample", sigma=CE_SIGMA, N=CE_N, r=1, tau=tau, eta=eta, mu=mu,
                     T=T, trials=trials, master_seed=0, schedule=schedule, oracle_samples=0, **kw)


@functools.lru_cache(maxsize=None)
def criterion4_runs():
    out = []
    for mu in (0.0, 0.9):
        cfg = _ce_config("powersgd", mu, eta_cap(mu, L_CE), trials=200, T=200)
        eta, outcomes = run_trials(cfg)
        summary = summarize(cfg, eta, outcomes)
        locked = sum(oc.metrics[-1].grad_sq_norm > GRAD_LOCK - 0.1 for oc in outcomes) / len(outcomes)
        out.append((mu, summary, locked, [oc.metrics for oc in outcomes]))
    return out


def test_criterion_4_statistical_nonconvergence():
    t0 = time.perf_counter()
    runs = criterion4_runs()
    eps0 = epsilon_zero(CE_X0, CE_N)
    ok = eps0 == 1.0
    parts = []
    for mu, s, locked, _ in runs:
        lcb = s.mean_grad_sq_final - s.ci_half_width
        ok &= lcb >= eps0 and s.verdict("nonconvergence").status == "pass"
        parts.append(f"mu={mu:g} eta={s.eta:g}: mean {s.mean_grad_sq_final:.4g} +/- {s.ci_half_width:.3g}, "
                     f"95% LCB {lcb:.4g} (locked fraction {locked:.3f})")
    elapsed = time.perf_counter() - t0
    ok &= elapsed < BUDGET[4]
    report(4, ok, f"95% LCB >= eps0 = {eps0:g} over 200 trials, T=200; " + "; ".join(parts), elapsed)
    info(4, "P(all step-0 draws = +1) * 16 = 16 / 2^N = eps0, so when unlocked trials converge the "
            "mean equals eps0 in expectation and its LCB sits below it")
    assert ok


@functools.lru_cache(maxsize=None)
def criterion5_runs():
    mu, tau = 0.9, 4
    out = {}
    for eta in sorted(set(ETA_GRID) | {eta_cap(mu, L_CE)}, reverse=True):
        cfg = _ce_config("powersgd_plus", mu, eta, trials=50, T=2000, tau=tau)
        e, outcomes = run_trials(cfg)
        out[eta] = (summarize(cfg, e, outcomes), [oc.metrics for oc in outcomes])
    return out


def quadratic_runs():
    mu, tau, cap = 0.9, 4, eta_cap(0.9, 1.0)
    target = make_rng(0).standard_normal((16, 8))
    finals = {}
    for eta in admissible_etas(mu, 1.0):
        prob = QuadraticProblem(16, 8, target, noise_sigma=0.0)
        res = simulate(prob, Hyper(eta=eta, mu=mu, tau=tau, rank=2), "powersgd_plus", CE_N, 2000, 0)
        finals[eta] = res.metrics[-1].grad_sq_norm
    return cap, finals


def test_criterion_5_powersgd_plus_converges():
    t0 = time.perf_counter()
    eps0 = epsilon_zero(CE_X0, CE_N)
    runs = criterion5_runs()
    cap = eta_cap(0.9, L_CE)
    admissible = {e: s for e, (s, _) in runs.items() if e <= cap * (1 + 1e-12)}
    best_eta = min(admissible, key=lambda e: admissible[e].mean_grad_sq_tail)
    best = admissible[best_eta]
    q_cap, q_finals = quadratic_runs()
    q_eta = min(q_finals, key=q_finals.get)
    elapsed = time.perf_counter() - t0
    ok = best.mean_grad_sq_tail <= 0.1 * eps0 and q_finals[q_eta] <= 1e-6 and elapsed < BUDGET[5]
    report(5, ok, f"counterexample PowerSGD+ tau=4 mu=0.9, tuned eta={best_eta:g} (<= (1-mu)/(2L) = {cap:g}, L=8): "
                  f"final-200 mean {best.mean_grad_sq_tail:.3g} <= {0.1 * eps0:g}; quadratic tuned eta={q_eta:g} "
                  f"(cap {q_cap:g}): final {q_finals[q_eta]:.3g} <= 1e-6", elapsed)
    for e, (s, _) in runs.items():
        tag = "within cap" if e <= cap * (1 + 1e-12) else "above cap"
        info(5, f"eta={e:g} ({tag}): final-200 mean {s.mean_grad_sq_tail:.4g} over 50 trials")
    for e, v in q_finals.items():
        info(5, f"quadratic eta={e:g}: final grad_sq {v:.3g}")
    assert ok


def test_criterion_6_comm_accounting():
    t0 = time.perf_counter()
    m, n, r, T = 8, 4, 2, 100
    prob = QuadraticProblem(m, n, make_rng(6).standard_normal((m, n)), noise_sigma=0.5)
    ssp = simulate(prob, Hyper(eta=0.1, rank=r), "powersgd", 2, T, 0).comm.per_node_floats
    plus = simulate(prob, Hyper(eta=0.1, tau=4, rank=r), "powersgd_plus", 2, T, 0).comm.per_node_floats
    simplified = simplified_comm_per_iteration("powersgd_plus", m, n, r, 4) * T
    elapsed = time.perf_counter() - t0
    ok = (ssp == 2400 == 100 * 24 == expected_comm_total("powersgd", m, n, r, 1, T)
          and plus == 2800 == 25 * (32 + 8) + 75 * 24 == expected_comm_total("powersgd_plus", m, n, r, 4, T)
          and expected_comm_per_iteration("powersgd_plus", m, n, r, 4) == 28 and elapsed < BUDGET[6])
    report(6, ok, f"PowerSGD total {ssp} == 2400; PowerSGD+ tau=4 total {plus} == 2800 "
                  f"(simplified per-iteration count nr+mr+mn/tau gives {simplified:g})", elapsed)
    assert ok


def test_criterion_7_bound_monitors():
    md = CounterexampleProblem(CE_SIGMA).metadata
    delta = 1 / 2
    entries = []
    crit3 = criterion3_runs()
    for mu in (0.0, 0.9):
        rows = [m for (key, _, m) in crit3 if key[0] == mu]
        entries.append(_monitor_entry(f"c3 mu={mu:g}", rows, 200, md.G_sq, delta, mu))
    for mu, _, _, rows in criterion4_runs():
        entries.append(_monitor_entry(f"c4 mu={mu:g}", rows, 200, md.G_sq, delta, mu))
    for eta, (_, rows) in criterion5_runs().items():
        entries.append(_monitor_entry(f"c5 eta={eta:g}", rows, 4, md.G_sq, delta, 0.9))
    ok = all(not e["violations"] for e in entries)
    worst_ef = max(entries, key=lambda e: e["ef_max"] / e["ef_lim"])
    worst_m = max(entries, key=lambda e: e["mom_max"] / e["mom_lim"])
    report(7, ok, f"no violations in {len(entries)} run groups (G^2 = {md.G_sq:g}, delta = 1/2; window tau for "
                  f"PowerSGD+, T for PowerSGD); tightest ef {worst_ef['ef_max']:.4g} <= {worst_ef['ef_lim']:.4g} "
                  f"({worst_ef['label']}), tightest ||m||^2 {worst_m['mom_max']:.4g} <= {worst_m['mom_lim']:.4g} "
                  f"({worst_m['label']})")
    info(7, "the quadratic run has no finite G and is not monitored")
    for e in entries:
        if e["violations"]:
            info(7, f"{e['label']}: first violation at trial/step {e['violations'][0]}")
    assert ok


def test_criterion_8_step_size_and_rate_scaling():
    rng = make_rng(808)
    worst_cap = 0.0
    for _ in range(1000):
        L = float(np.exp(rng.uniform(-3, 3)))
        sigma = float(np.exp(rng.uniform(-3, 3)))
        N, T, tau = int(rng.integers(1, 257)), int(rng.integers(1, 10**6)), int(rng.integers(1, 33))
        dF, G = float(np.exp(rng.uniform(-3, 3))), float(np.exp(rng.uniform(-3, 3)))
        delta, mu = float(rng.uniform(1e-3, 1.0)), float(rng.uniform(0, 0.99))
        eta = theoretical_step_size(L, sigma, N, T, dF, tau, G, delta, mu)
        worst_cap = max(worst_cap, eta / eta_cap(mu, L))
    # Linear speedup: sigma term dominant, N x 4.
    base = dict(L=1.0, sigma=1e4, N=4, T=1000, deltaF=1.0, tau=1, G=1.0, delta=1.0, mu=0.0)
    t1 = rate_bound_terms(**base)
    t4 = rate_bound_terms(**{**base, "N": 16})
    noise_ratio_err = abs(t4[0] / t1[0] - 0.5)
    closed = (t1[0] / 2 + t1[1] + t1[2]) / sum(t1)
    total_ratio_err = abs(theoretical_rate_bound(**{**base, "N": 16}) / theoretical_rate_bound(**base) - closed)
    # Compression term dominant, tau x 8: third term scales as tau^(2/3).
    comp = dict(L=1.0, sigma=0.0, N=4, T=1000, deltaF=1.0, tau=2, G=1e3, delta=0.25, mu=0.5)
    c1 = rate_bound_terms(**comp)
    c8 = rate_bound_terms(**{**comp, "tau": 16})
    tau_ratio_err = abs(c8[2] / c1[2] - 8 ** (2 / 3)) / 8 ** (2 / 3)
    ok = worst_cap <= 1.0 and max(noise_ratio_err, total_ratio_err, tau_ratio_err) <= 1e-12
    report(8, ok, f"max eta/((1-mu)/(2L)) over 1000 tuples {worst_cap:.6f} <= 1; N x4 noise-term ratio error "
                  f"{noise_ratio_err:.2g}, total-bound ratio error {total_ratio_err:.2g}, tau x8 term ratio "
                  f"error {tau_ratio_err:.2g} (all <= 1e-12); noise share of bound {t1[0] / sum(t1):.4f}, "
                  f"compression share {c1[2] / sum(c1):.4f}")
    assert ok


def test_criterion_9_reproducible_csv(tmp_path):
    configs = [
        _ce_config("powersgd", 0.9, 0.05, trials=2, T=60),
        _ce_config("powersgd_plus", 0.9, "theoretical", trials=2, T=60, tau=4),
        _ce_config("powersgd", 0.0, 0.1, trials=2, T=60, force_xi0_ones=True),
        RunConfig(problem="quadratic", m=6, n=4, r=2, tau=3, eta=0.1, mu=0.5, T=60, trials=2,
                  noise_sigma=0.7, N=3, schedule="powersgd_plus", oracle_samples=0),
        RunConfig(problem="quadratic", m=5, n=5, r=1, eta=0.2, T=60, trials=2, noise_sigma=0.3,
                  schedule="uncompressed", oracle_samples=0),
    ]
    identical = 0
    total = 0
    for i, cfg in enumerate(configs):
        a, b = tmp_path / f"{i}a", tmp_path / f"{i}b"
        run_study(cfg, a)
        run_study(cfg, b)
        for f in sorted(a.glob("trial_*.csv")):
            total += 1
            identical += f.read_bytes() == (b / f.name).read_bytes()
    ok = identical == total > 0
    report(9, ok, f"{identical}/{total} per-trial metrics CSVs byte-identical across repeated runs "
                  f"({len(configs)} configs)")
    assert ok


if __name__ == "__main__":
    import tempfile

    tests = [v for k, v in sorted(globals().items()) if k.startswith("test_criterion_")]
    failed = 0
    for fn in tests:
        try:
            if "tmp_path" in fn.__code__.co_varnames[: fn.__code__.co_argcount]:
                with tempfile.TemporaryDirectory() as d:
                    fn(Path(d))
            else:
                fn()
        except AssertionError:
            failed += 1
    print(f"{len(tests) - failed}/{len(tests)} criteria passed")
    sys.exit(1 if failed else 0)
