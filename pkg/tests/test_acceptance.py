"""Acceptance battery: one test per release criterion.

Each test prints a single `PASS — <criterion>` (or `FAIL — <criterion>`)
line before asserting, so `pytest -s tests/test_acceptance.py` reads as the
release checklist.  Tolerances and runtime caps are part of the criteria;
loosening either here voids the check.
"""

import math
import time

import numpy as np
import pytest

from chips.curvature import MomentAccumulator, accumulate, moments
from chips.datastore import RunConfig
from chips.endpoint import (
    EndpointParams,
    FeatureBatch,
    forward,
    params_to_vector,
    symmetric_infonce,
    total_gradient,
    vector_to_params,
)
from chips.flopsmeter import batch_primitives, default_model, method_total
from chips.numerics import cg_solve, substream
from chips.pipeline import run_score, run_select, run_synth
from chips.scoring import make_record, utility_and_select
from chips.theorylab import (
    make_linearized_world,
    make_population_world,
    make_toy_encoder,
    verify_batch_moments,
    verify_correlation_bound,
    verify_descent,
    verify_proxy_fidelity,
    verify_sketch_error_split,
)


def _criterion(label: str, ok: bool, detail: str = "") -> None:
    tail = f"  [{detail}]" if detail else ""
    print(f"{'PASS' if ok else 'FAIL'} — {label}{tail}")
    assert ok, f"{label}{tail}"


@pytest.fixture(scope="module")
def world1k(tmp_path_factory):
    out = tmp_path_factory.mktemp("acceptance-world")
    return run_synth(out, pool_count=1000, eval_count=100, seed=0, shards=2)


def _scoring_config(**overrides) -> RunConfig:
    base = dict(
        method="chips",
        sketch_kind="countsketch",
        sketch_k=128,
        scoring_batch_size=64,
        seed=3,
    )
    base.update(overrides)
    return RunConfig(**base)


# ------------------------------------------------------------ gradients


def test_gradients_match_central_differences():
    t0 = time.perf_counter()
    step = 1e-5
    worst = 0.0
    for seed in range(50):
        rng = substream(seed, "acceptance", "fd-instance")
        B = int(rng.integers(2, 9))
        d = int(rng.integers(2, 17))
        d_v = int(rng.integers(3, 17))
        d_t = int(rng.integers(3, 17))
        params = EndpointParams(
            rng.standard_normal((d_v, d)) / np.sqrt(d_v),
            rng.standard_normal((d_t, d)) / np.sqrt(d_t),
            0.3,
        )
        batch = FeatureBatch(
            np.arange(B, dtype=np.uint64),
            rng.standard_normal((B, d_v)),
            rng.standard_normal((B, d_t)),
        )
        analytic = total_gradient(params, batch)

        def batch_loss(vec):
            p = vector_to_params(vec, d_v, d_t, d)
            return float(symmetric_infonce(forward(p, batch)).sum())

        theta = params_to_vector(params)
        fd = np.empty_like(theta)
        for p in range(theta.size):
            tp = theta.copy()
            tp[p] += step
            tm = theta.copy()
            tm[p] -= step
            fd[p] = (batch_loss(tp) - batch_loss(tm)) / (2 * step)
        scale = max(float(np.max(np.abs(fd))), 1e-12)
        worst = max(worst, float(np.max(np.abs(analytic - fd))) / scale)
    elapsed = time.perf_counter() - t0
    _criterion(
        "analytic end-point gradients match central finite differences on 50 "
        "seeded instances (max rel err <= 1e-5, < 10 s)",
        worst <= 1e-5 and elapsed < 10.0,
        f"worst={worst:.3e}, {elapsed:.1f}s",
    )


# ------------------------------------------------------------ cost model


def test_cost_model_reproduces_documented_numbers():
    t0 = time.perf_counter()
    model = default_model()
    train = batch_primitives(model, model.B_train)
    evalb = batch_primitives(model, model.B_eval)
    expected_train = {
        "C_lin": 42_949_672_960,
        "C_norm": 100_663_296,
        "C_mm": 1_099_511_627_776,
        "C_fwd": 2_242_073_591_808,
        "C_bwd": 4_483_945_857_024,
        "C_fb": 6_726_019_448_832,
    }
    expected_eval = {
        "C_lin": 4_456_448_000,
        "C_norm": 10_444_800,
        "C_mm": 11_837_440_000,
        "C_fwd": 28_141_772_800,
        "C_bwd": 56_262_656_000,
        "C_fb": 84_404_428_800,
    }
    prims_ok = all(train[k] == v for k, v in expected_train.items()) and all(
        evalb[k] == v for k, v in expected_eval.items()
    )
    totals = {m: f"{method_total(model, m):.6e}" for m in ("tracin", "trak", "chips")}
    totals_ok = totals == {
        "tracin": "5.258869e+16",
        "trak": "5.094585e+16",
        "chips": "5.094747e+16",
    }
    elapsed = time.perf_counter() - t0
    _criterion(
        "FLOPs primitives reproduce all six documented per-batch values and "
        "method totals match to printed precision with c_neg = 6 (< 1 s)",
        prims_ok and totals_ok and model.c_neg == 6 and elapsed < 1.0,
        f"totals={totals}, {elapsed:.2f}s",
    )


# ------------------------------------------------------------ theory checks


def test_correlation_lower_bound_holds_in_every_world():
    t0 = time.perf_counter()
    margins = []
    ok = True
    for i in range(20):
        world = make_linearized_world(i, aligned_covariance=bool(i % 2))
        rep = verify_correlation_bound(world, samples=10_000, seed=i)
        ok = ok and rep.passed and rep.rho_hat >= rep.bound - 3.0 * rep.se
        margins.append(rep.rho_hat - (rep.bound - 3.0 * rep.se))
    elapsed = time.perf_counter() - t0
    _criterion(
        "measured alignment-improvement correlation >= its lower bound - 3 SE "
        "in all 20 linearized worlds (P=16, 1e4 samples, < 60 s)",
        ok and elapsed < 60.0,
        f"min margin={min(margins):.4f}, {elapsed:.1f}s",
    )


def test_sketch_variance_decay_and_matched_alpha_unbiasedness():
    t0 = time.perf_counter()
    rep = verify_sketch_error_split(make_population_world(0), seed=0)
    slope_ok = abs(rep.variance_slope + 1.0) <= 0.3
    bias_ok = rep.bias_at_alpha_star <= 1e-10
    elapsed = time.perf_counter() - t0
    _criterion(
        "sketch variance slope vs k in {64,128,256,512} is -1 +/- 0.3 over 200 "
        "seeds and bias <= 1e-10 at the curvature-matched alpha (< 5 min)",
        slope_ok and bias_ok and rep.passed and tuple(rep.k_grid) == (64, 128, 256, 512)
        and elapsed < 300.0,
        f"slope={rep.variance_slope:.3f}, bias={rep.bias_at_alpha_star:.1e}, "
        f"{elapsed:.1f}s",
    )


def test_batch_moment_identity_at_each_batch_size():
    t0 = time.perf_counter()
    world = make_toy_encoder(0)
    reps = [verify_batch_moments(world, B, mc_draws=100_000, seed=0) for B in (1, 4, 8)]
    ok = all(r.passed and r.rel_err <= 0.02 for r in reps)
    elapsed = time.perf_counter() - t0
    _criterion(
        "Monte-Carlo E||g_batch||^2 matches ||g_mean||^2 + tr(cov)/B within 2% "
        "at B in {1,4,8} with 1e5 draws (< 30 s)",
        ok and elapsed < 30.0,
        "rel_err=" + ",".join(f"{r.rel_err:.4f}" for r in reps) + f", {elapsed:.1f}s",
    )


def test_alignment_selection_descends_eval_loss():
    t0 = time.perf_counter()
    rep = verify_descent(make_toy_encoder(0), trials=50, seed=0)
    elapsed = time.perf_counter() - t0
    _criterion(
        "alignment-selected batches lower eval loss more often than random in "
        ">= 80% of 50 seeded trials (< 60 s)",
        rep.passed and rep.fraction >= 0.8 and elapsed < 60.0,
        f"fraction={rep.fraction:.2f}, {elapsed:.1f}s",
    )


def test_proxy_utilities_track_full_width_utilities():
    t0 = time.perf_counter()
    rep = verify_proxy_fidelity(master_seed=0)
    elapsed = time.perf_counter() - t0
    _criterion(
        "narrow-head proxy utilities track full-width utilities with Spearman "
        ">= 0.7 on every one of 10 toy seeds",
        rep.passed and rep.seeds == 10 and rep.min_rho >= 0.7,
        f"min rho={rep.min_rho:.3f}, {elapsed:.1f}s",
    )


# ------------------------------------------------------------ drift


def test_scored_pool_drift_stays_within_one_nat(tmp_path):
    t0 = time.perf_counter()
    paths = run_synth(
        tmp_path / "w",
        pool_count=10_000,
        eval_count=200,
        seed=0,
        shards=4,
        train_steps=12,
    )
    run = run_score(_scoring_config(), paths["pool"], [paths["eval"]], paths["params"])
    rep = run.drift
    lo, hi = math.exp(-1.0), math.exp(1.0)
    ok = (
        rep is not None
        and rep.kl <= 1.0
        and rep.ratio_min >= lo
        and rep.ratio_max <= hi
        and len(run.records) == 10_000
    )
    elapsed = time.perf_counter() - t0
    _criterion(
        "relevance reweighting of a scored 1e4-sample pool keeps KL <= 1 nat "
        "and density ratios within [1/e, e]",
        ok,
        f"kl={rep.kl:.4f}, ratios=[{rep.ratio_min:.3f}, {rep.ratio_max:.3f}], "
        f"{elapsed:.1f}s",
    )


# ------------------------------------------------------------ oracle equivalences


def test_independent_oracle_equivalences(world1k):
    failures = []

    # (a) conjugate gradients vs dense solve on a 64x64 SPD system
    rng = substream(0, "acceptance", "cg-oracle")
    Q, _ = np.linalg.qr(rng.standard_normal((64, 64)))
    H = Q @ np.diag(np.linspace(1.0, 100.0, 64)) @ Q.T
    H = 0.5 * (H + H.T)
    b = rng.standard_normal(64)
    x_cg, _ = cg_solve(H, b, iters=256, tol=1e-14)
    cg_diff = float(np.max(np.abs(x_cg - np.linalg.solve(H, b))))
    if cg_diff > 1e-8:
        failures.append(f"cg={cg_diff:.2e}")

    # (b) streaming moment accumulator vs the O(N^2) pair loop
    G = substream(0, "acceptance", "moment-oracle").standard_normal((40, 12))
    acc = MomentAccumulator("exact-P", 12)
    for lo in range(0, 40, 8):
        accumulate(acc, G[lo : lo + 8])
    phi_pos, phi_neg = moments(acc)
    pos_ref = np.zeros((12, 12))
    neg_ref = np.zeros((12, 12))
    for i in range(40):
        pos_ref += np.outer(G[i], G[i])
        for j in range(40):
            if j != i:
                neg_ref += np.outer(G[i], G[j])
    pos_ref /= 40.0
    neg_ref /= 40.0 * 39.0
    moment_diff = max(
        float(np.max(np.abs(phi_pos - pos_ref))),
        float(np.max(np.abs(phi_neg - neg_ref))),
    )
    if moment_diff > 1e-12:
        failures.append(f"moments={moment_diff:.2e}")

    # (c) partial top-n selection vs full sort-then-truncate, with heavy ties
    rng = substream(0, "acceptance", "topn-oracle")
    ids = rng.permutation(500).astype(np.uint64)
    utils = np.round(rng.standard_normal(500), 1)  # 1-decimal grid forces ties
    records = [
        make_record(int(i), float(u), 1.0, 1.0, "") for i, u in zip(ids, utils)
    ]
    for r in (0.2, 1.0):
        manifest = utility_and_select(records, r, "")
        order = np.lexsort((ids, -utils))
        expected = ids[order][: int(math.floor(r * 500))]
        if not np.array_equal(manifest.retained, expected):
            failures.append(f"topn(r={r})")

    # (d) identity-preconditioned scoring ranks exactly like the plain dot
    pool, evals, params = world1k["pool"], [world1k["eval"]], world1k["params"]
    dot_run = run_score(_scoring_config(method="dot"), pool, evals, params)
    id_run = run_score(
        _scoring_config(
            method="chips", identity_preconditioner=True, ablation="alignment-only"
        ),
        pool,
        evals,
        params,
    )
    dot_u = np.array([rec.utility for rec in dot_run.records])
    id_u = np.array([rec.utility for rec in id_run.records])
    if not np.array_equal(dot_u, id_u):
        failures.append("identity-vs-dot utilities")
    dot_sel = utility_and_select(dot_run.records, 0.2, "")
    id_sel = utility_and_select(id_run.records, 0.2, "")
    if not np.array_equal(dot_sel.retained, id_sel.retained):
        failures.append("identity-vs-dot ranking")

    _criterion(
        "oracle equivalences: CG vs dense solve <= 1e-8 (64x64), streaming "
        "moments vs O(N^2) loop <= 1e-12, top-n vs full sort exact, "
        "identity-preconditioned ranking == dot ranking exact",
        not failures,
        "; ".join(failures) if failures else
        f"cg={cg_diff:.1e}, moments={moment_diff:.1e}",
    )


# ------------------------------------------------------------ determinism


def test_runs_are_byte_identical_across_repeats_and_workers(world1k, tmp_path):
    pool, evals, params = world1k["pool"], [world1k["eval"]], world1k["params"]
    artifacts = {}
    for tag, workers in (("first", 1), ("repeat", 1), ("parallel", 4)):
        base = tmp_path / tag
        base.mkdir()
        cfg = _scoring_config(workers=workers)
        run_score(
            cfg,
            pool,
            evals,
            params,
            out_scores=base / "scores.chsc",
            out_surrogate=base / "surr.chcv",
            out_scores_text=base / "scores.tsv",
        )
        run_select(base / "scores.chsc", 0.25, out_path=base / "sel.chmf")
        artifacts[tag] = {
            name: (base / name).read_bytes()
            for name in ("scores.chsc", "surr.chcv", "scores.tsv", "sel.chmf")
        }
    repeat_ok = artifacts["first"] == artifacts["repeat"]
    worker_ok = artifacts["first"] == artifacts["parallel"]
    _criterion(
        "two identical score+select runs produce byte-identical score, "
        "surrogate, text, and manifest files, including across worker counts "
        "{1, 4}",
        repeat_ok and worker_ok,
        f"repeat={repeat_ok}, workers={worker_ok}",
    )
