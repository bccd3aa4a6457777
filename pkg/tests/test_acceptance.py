"""Acceptance suite: one test per release criterion, at full scale.

Heavy artifacts (the default benchmark sweep, per-dimension agreement and
timing runs) are cached under tests/_acceptance_cache; the sweep is
resumable, so interrupted runs continue where they stopped. Each criterion
prints one PASS/FAIL line; run with `pytest -s tests/test_acceptance.py`
to see them live.
"""

import json
import struct
import time
from pathlib import Path

import numpy as np
import pytest

from diffdens import bench, nn, pathint, pfode
from diffdens.analytic import (
    exact_flow_divergence,
    exact_score_field,
    gaussian_log_density,
)
from diffdens.bench import BenchConfig, sweep, timing_compare
from diffdens.gmm import benchmark_mixture, gmm_sample
from diffdens.pathint import EstimateConfig, log_density
from diffdens.pfode import OdeConfig, log_density_ode
from diffdens.rng import derive_key, make_rng
from diffdens.sde import DiffusionProcess
from diffdens.train import TrainConfig, train

CACHE = Path(__file__).parent / "_acceptance_cache"
CACHE.mkdir(exist_ok=True)

VP = DiffusionProcess(kind="vp")

SUITE_DIMS = (2, 4, 9)
FULL_BUDGET = {"n_samples": 8192, "n_throws": 10, "n_epochs": 200}
SUITE_BENCH = BenchConfig(n_test=10_000, n_seeds=8, kl_n_throws=1024,
                          master_seed=0, workers=2)
AGREE_N_THROWS = 100_000
AGREE_N_EPS = 1000
AGREE_POINTS = 100


def _report(num: int, name: str, ok: bool, detail: str = "") -> None:
    status = "PASS" if ok else "FAIL"
    line = f"ACCEPTANCE {num:2d} [{name}]: {status}"
    if detail:
        line += f" ({detail})"
    print(line, flush=True)
    assert ok, line


# ---------------------------------------------------------------------------
# Heavy shared artifacts
# ---------------------------------------------------------------------------

@pytest.fixture(scope="session")
def suite_rows():
    """The full default benchmark plus the N- and epoch-sweep cells."""
    out = CACHE / "suite_results.csv"
    rows = sweep(
        dict(FULL_BUDGET),
        {"process": ["vp"], "objective": ["sm", "em"], "dim": list(SUITE_DIMS)},
        out, SUITE_BENCH,
    )
    rows = sweep(
        dict(FULL_BUDGET),
        {"process": ["ve"], "objective": ["sm"], "dim": list(SUITE_DIMS)},
        out, SUITE_BENCH,
    )
    rows = sweep(
        dict(FULL_BUDGET),
        {"process": ["vp"], "objective": ["sm"], "dim": [2, 9],
         "n_samples": [1024]},
        out, SUITE_BENCH,
    )
    rows = sweep(
        dict(FULL_BUDGET),
        {"process": ["vp"], "objective": ["sm", "em"], "dim": [2],
         "n_epochs": [10]},
        out, SUITE_BENCH,
    )
    return rows


def _median_kl(rows, **match):
    vals = [r["kl_upper"] for r in rows
            if all(r[k] == v for k, v in match.items())]
    assert vals, f"no sweep rows match {match}"
    return float(np.median(vals)), len(vals)


def _trained_model(dim: int) -> tuple[nn.MlpParams, list]:
    """Full-budget VP-SM model per dimension, checkpoint-cached."""
    ckpt = CACHE / f"vpsm_d{dim}.bin"
    hist_path = CACHE / f"vpsm_d{dim}_history.json"
    if ckpt.exists() and hist_path.exists():
        params, _, _ = nn.load_checkpoint(ckpt)
        return params, json.loads(hist_path.read_text())
    mix = benchmark_mixture(dim)
    data = gmm_sample(mix, FULL_BUDGET["n_samples"],
                      seed=derive_key(0, "agree-data", dim) % 2**63)
    cfg = TrainConfig(
        n_samples=FULL_BUDGET["n_samples"], n_throws=FULL_BUDGET["n_throws"],
        n_epochs=FULL_BUDGET["n_epochs"], process=VP, objective="sm",
        seed=derive_key(0, "agree-train", dim) % 2**63,
    )
    params, history = train(cfg, data)
    nn.save_checkpoint(ckpt, params, "sm", VP)
    hist_path.write_text(json.dumps([r.mean_loss for r in history]))
    return params, [r.mean_loss for r in history]


@pytest.fixture(scope="session")
def agreement_runs():
    """Per dimension: shared points, per-sample path/ode values and times,
    plus replicate-based ODE standard errors."""
    results = {}
    for dim in SUITE_DIMS:
        cache_csv = CACHE / f"agree_d{dim}.csv"
        cache_meta = CACHE / f"agree_d{dim}.json"
        if cache_csv.exists() and cache_meta.exists():
            results[dim] = {
                "rows": bench.read_timing_csv(cache_csv),
                **json.loads(cache_meta.read_text()),
            }
            continue
        params, _ = _trained_model(dim)
        mix = benchmark_mixture(dim)
        pts = gmm_sample(mix, AGREE_POINTS, seed=derive_key(0, "agree-pts", dim) % 2**63)
        t0 = time.perf_counter()
        rows = timing_compare(
            params, VP, "sm", ["path", "ode"], pts,
            EstimateConfig(n_throws=AGREE_N_THROWS, seed=derive_key(0, "agree-est", dim)),
            OdeConfig(n_eps=AGREE_N_EPS, noise="gaussian"),
        )
        wall = time.perf_counter() - t0
        # per-point path std errors and replicate-based ODE noise level
        path_se = []
        for i in range(8):
            est = log_density(
                "sm", params, VP, pts[i],
                EstimateConfig(n_throws=AGREE_N_THROWS,
                               seed=derive_key(1, "se", dim, i) % 2**63),
            )
            path_se.append(est.std_error)
        ode_reps = []
        for i in range(4):
            vals = [
                log_density_ode(
                    "sm", params, VP, pts[i],
                    OdeConfig(n_eps=AGREE_N_EPS, noise="gaussian",
                              seed=derive_key(2, "oderep", dim, i, r) % 2**63),
                ).logp
                for r in range(4)
            ]
            ode_reps.append(float(np.std(vals, ddof=1)))
        meta = {
            "wall_s": wall,
            "path_se": float(np.mean(path_se)),
            "ode_se": float(np.mean(ode_reps)),
        }
        bench.write_timing_csv(cache_csv, rows)
        cache_meta.write_text(json.dumps(meta))
        results[dim] = {"rows": bench.read_timing_csv(cache_csv), **meta}
    return results


@pytest.fixture(scope="session")
def delayed_runs():
    """Per-step vs delayed trace mode on the D=2 model, 8 shared points."""
    cache = CACHE / "delayed.json"
    if cache.exists():
        return json.loads(cache.read_text())
    params, _ = _trained_model(2)
    mix = benchmark_mixture(2)
    pts = gmm_sample(mix, 8, seed=derive_key(0, "delayed-pts") % 2**63)
    recs = []
    for i, x in enumerate(pts):
        ref = log_density(
            "sm", params, VP, x,
            EstimateConfig(n_throws=AGREE_N_THROWS,
                           seed=derive_key(3, "ref", i) % 2**63),
        )
        per = log_density_ode(
            "sm", params, VP, x,
            OdeConfig(n_eps=AGREE_N_EPS, noise="gaussian", trace_mode="per-step",
                      seed=derive_key(3, "per", i) % 2**63),
        )
        dly = log_density_ode(
            "sm", params, VP, x,
            OdeConfig(n_eps=AGREE_N_EPS, noise="gaussian", trace_mode="delayed",
                      seed=derive_key(3, "dly", i) % 2**63),
        )
        recs.append({
            "ref": ref.value, "ref_se": ref.std_error,
            "per": per.logp, "per_t": per.wall_time,
            "dly": dly.logp, "dly_t": dly.wall_time,
            "dly_se": float(np.std(dly.values, ddof=1) / np.sqrt(len(dly.values))),
        })
    cache.write_text(json.dumps(recs))
    return recs


# ---------------------------------------------------------------------------
# Criteria
# ---------------------------------------------------------------------------

ORACLE_MEAN = np.zeros(2)
ORACLE_VAR = np.array([1.3, 0.7])


def _oracle_points(n=20, seed=101):
    rng = make_rng(seed, "oracle-points")
    return ORACLE_MEAN + np.sqrt(ORACLE_VAR) * rng.standard_normal((n, 2))


def test_criterion_1_saturation():
    t0 = time.perf_counter()
    score = exact_score_field(VP, ORACLE_MEAN, ORACLE_VAR)
    worst_z = 0.0
    ok = True
    for i, x in enumerate(_oracle_points()):
        est = log_density(
            "sm", score, VP, x,
            EstimateConfig(n_throws=100_000, seed=1000 + i, s_min=1e-5),
        )
        truth = gaussian_log_density(ORACLE_MEAN, ORACLE_VAR, x)
        z = abs(est.value - truth) / est.std_error
        worst_z = max(worst_z, z)
        ok &= z <= 3.0
    wall = time.perf_counter() - t0
    ok &= wall < 60.0
    _report(1, "path-integral saturation", ok,
            f"worst |z|={worst_z:.2f}, {wall:.1f}s")


def test_criterion_2_ode_oracle():
    t0 = time.perf_counter()
    score = exact_score_field(VP, ORACLE_MEAN, ORACLE_VAR)
    div = exact_flow_divergence(VP, ORACLE_MEAN, ORACLE_VAR)
    cfg = OdeConfig(rtol=1e-5, atol=1e-5, s_min=1e-5)
    worst = 0.0
    for x in _oracle_points():
        r = log_density_ode("sm", score, VP, x, cfg, divergence_fn=div)
        worst = max(worst, abs(r.logp - gaussian_log_density(ORACLE_MEAN, ORACLE_VAR, x)))
    wall = time.perf_counter() - t0
    ok = worst < 1e-3 and wall < 60.0
    _report(2, "flow-ODE transport oracle", ok,
            f"worst |err|={worst:.2e}, {wall:.1f}s")


def test_criterion_3_estimator_agreement(agreement_runs):
    ok = True
    details = []
    total_wall = 0.0
    for dim in SUITE_DIMS:
        rec = agreement_runs[dim]
        by_method = {}
        for row in rec["rows"]:
            by_method.setdefault(row["method"], {})[row["index"]] = row["value"]
        diffs = np.array([
            by_method["path"][i] - by_method["ode"][i] for i in range(AGREE_POINTS)
        ])
        mean_abs = float(np.mean(np.abs(diffs)))
        combined = float(np.hypot(rec["path_se"], rec["ode_se"]))
        ok &= mean_abs <= 3 * combined
        if dim == 2:
            ok &= mean_abs <= 0.1
        total_wall += rec["wall_s"]
        details.append(f"D={dim}: mean|d|={mean_abs:.3f} vs 3*se={3 * combined:.3f}")
    ok &= total_wall < 1800.0
    _report(3, "path vs ODE agreement", ok,
            "; ".join(details) + f"; wall={total_wall:.0f}s")


def test_criterion_4_kl_nonnegativity(suite_rows):
    rows = [r for r in suite_rows
            if r["N"] == 8192 and r["n_ep"] == 200 and r["D"] in SUITE_DIMS]
    rows = [r for r in rows if r["kind"] in ("vp-sm", "vp-em", "ve-sm")]
    expected = 3 * len(SUITE_DIMS) * SUITE_BENCH.n_seeds
    ok = len(rows) == expected
    worst = np.inf
    for r in rows:
        margin = r["kl_upper"] + 3 * r["kl_stderr"]
        worst = min(worst, margin)
        ok &= margin >= 0.0 and np.isfinite(r["kl_upper"])
    _report(4, "KL non-negativity across suite", ok,
            f"{len(rows)} runs, min(kl+3se)={worst:.4f}")


def test_criterion_5_more_samples_help(suite_rows):
    ok = True
    details = []
    for dim in (2, 9):
        lo, n_lo = _median_kl(suite_rows, kind="vp-sm", D=dim, N=1024, n_ep=200)
        hi, n_hi = _median_kl(suite_rows, kind="vp-sm", D=dim, N=8192, n_ep=200)
        ok &= n_lo == n_hi == SUITE_BENCH.n_seeds
        ok &= hi < lo
        details.append(f"D={dim}: {lo:.3f} -> {hi:.3f}")
    _report(5, "KL decreases with N", ok, "; ".join(details))


def test_criterion_6_epoch_trends(suite_rows):
    em10, _ = _median_kl(suite_rows, kind="vp-em", D=2, n_ep=10, N=8192)
    em200, _ = _median_kl(suite_rows, kind="vp-em", D=2, n_ep=200, N=8192)
    sm10, _ = _median_kl(suite_rows, kind="vp-sm", D=2, n_ep=10, N=8192)
    sm200, _ = _median_kl(suite_rows, kind="vp-sm", D=2, n_ep=200, N=8192)
    em_ok = abs(em10 - em200) <= 0.25 * em200
    sm_ok = (sm10 - sm200) / sm10 >= 0.40
    _report(6, "epoch-budget trends", em_ok and sm_ok,
            f"em {em10:.3f} vs {em200:.3f}; sm {sm10:.3f} -> {sm200:.3f}")


def test_criterion_7_timing_shape(agreement_runs, delayed_runs):
    ok = True
    details = []
    for dim in SUITE_DIMS:
        rows = agreement_runs[dim]["rows"]
        path_t = np.array([r["wall_time_s"] for r in rows if r["method"] == "path"])
        ode_t = np.array([r["wall_time_s"] for r in rows if r["method"] == "ode"])
        cv_path = path_t.std(ddof=1) / path_t.mean()
        cv_ode = ode_t.std(ddof=1) / ode_t.mean()
        ok &= path_t.mean() < ode_t.mean()
        ok &= cv_ode > cv_path
        details.append(
            f"D={dim}: path {path_t.mean():.2f}s cv {cv_path:.2f} | "
            f"ode {ode_t.mean():.2f}s cv {cv_ode:.2f}"
        )
    per_t = np.array([r["per_t"] for r in delayed_runs])
    dly_t = np.array([r["dly_t"] for r in delayed_runs])
    ok &= dly_t.mean() > per_t.mean()
    per_err = np.array([r["per"] - r["ref"] for r in delayed_runs])
    dly_err = np.array([r["dly"] - r["ref"] for r in delayed_runs])
    noise = np.array([
        np.sqrt(r["dly_se"] ** 2 + r["ref_se"] ** 2) for r in delayed_runs
    ])
    gain = float(np.mean(np.abs(per_err)) - np.mean(np.abs(dly_err)))
    no_gain = gain <= 3 * float(np.mean(noise))
    ok &= no_gain
    details.append(
        f"delayed {dly_t.mean():.1f}s vs per-step {per_t.mean():.1f}s, gain {gain:+.3f}"
    )
    _report(7, "timing shape", ok, "; ".join(details))


def test_criterion_8_trace_estimator():
    rng = make_rng(808, "accept-linear-field")
    A = rng.standard_normal((9, 9)) + 10.0 * np.eye(9)
    tr = float(np.trace(A))
    lin = lambda X, s, dout: dout @ A
    rad = nn.batched_eps_divergence(lin, np.zeros(9), 0.5, 1000, "rademacher", seed=1)
    gau = nn.batched_eps_divergence(lin, np.zeros(9), 0.5, 1000, "gaussian", seed=2)
    rad_rel = abs(rad - tr) / abs(tr)
    gau_rel = abs(gau - tr) / abs(tr)
    ests = np.array([
        nn.batched_eps_divergence(lin, np.zeros(9), 0.5, 1000, "gaussian", seed=k)
        for k in range(100)
    ])
    se = ests.std(ddof=1) / 10.0
    unbiased = abs(ests.mean() - tr) <= 3 * se
    ok = rad_rel < 0.02 and gau_rel < 0.15 and unbiased
    _report(8, "randomised trace estimator", ok,
            f"rademacher {rad_rel:.3%}, gaussian {gau_rel:.3%}, "
            f"bias z={abs(ests.mean() - tr) / se:.2f}")


def test_criterion_9_driftless_equivalence(tmp_path_factory):
    out = tmp_path_factory.mktemp("ve-equiv")
    ve = DiffusionProcess(kind="ve")
    mix = benchmark_mixture(2)
    data = gmm_sample(mix, 1024, seed=99)
    histories = {}
    blobs = {}
    for obj in ("sm", "em"):
        cfg = TrainConfig(
            n_samples=1024, n_throws=10, n_epochs=10, process=ve,
            objective=obj, seed=424242,
        )
        params, hist = train(cfg, data)
        histories[obj] = [r.mean_loss for r in hist]
        path = out / f"{obj}.bin"
        nn.save_checkpoint(path, params, obj, ve)
        blobs[obj] = path.read_bytes()
    losses_equal = histories["sm"] == histories["em"]
    # the checkpoint header necessarily records the declared objective; the
    # trainable payload must agree bit for bit
    payloads = {}
    for obj, blob in blobs.items():
        (hlen,) = struct.unpack("<I", blob[4:8])
        payloads[obj] = blob[8 + hlen:]
        header = json.loads(blob[8 : 8 + hlen].decode())
        assert header["kind"] == obj
    payload_equal = payloads["sm"] == payloads["em"]
    _report(9, "driftless sm == em", losses_equal and payload_equal,
            f"losses equal={losses_equal}, payload equal={payload_equal}")


def test_criterion_10_gradient_gate():
    params = nn.init_params(3, seed=5)
    rng = make_rng(5, "gate-out")
    params.layers[-1][0][...] = 0.3 * rng.standard_normal(params.layers[-1][0].shape)
    x = np.array([0.3, -1.2, 0.8])
    s, up = 0.37, np.array([0.5, -1.0, 2.0])
    ok = True
    h = 1e-4
    grads = nn.grad_params(params, x, s, up)
    grng = np.random.default_rng(0)
    for _ in range(20):
        li = int(grng.integers(len(params.layers)))
        wi = int(grng.integers(2))
        arr = params.layers[li][wi]
        idx = tuple(int(grng.integers(d)) for d in arr.shape)
        arr[idx] += h
        fp = float(up @ nn.forward(params, x, s))
        arr[idx] -= 2 * h
        fm = float(up @ nn.forward(params, x, s))
        arr[idx] += h
        fd = (fp - fm) / (2 * h)
        if abs(fd) > 1e-8:
            ok &= abs(grads[li][wi][idx] - fd) / abs(fd) < 1e-4
    gi = nn.grad_input_dot(params, x, s, up)
    for i in range(3):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        fd = (up @ nn.forward(params, xp, s) - up @ nn.forward(params, xm, s)) / (2 * h)
        ok &= abs(gi[i] - fd) / max(abs(fd), 1e-12) < 1e-4
    # loss gradients on a tiny network
    cfg = TrainConfig(n_samples=8, n_throws=2, n_epochs=1, process=VP,
                      n_features=4, hidden=(2,), seed=3)
    tiny = nn.init_params(2, 3, n_features=4, hidden=(2,))
    tiny.layers[-1][0][...] = 0.5 * make_rng(7, "tiny").standard_normal(
        tiny.layers[-1][0].shape
    )
    from diffdens.train import loss_minibatch

    y0 = make_rng(8, "tiny-data").standard_normal((8, 2))
    _, tgrads = loss_minibatch(tiny, cfg, y0, epoch_seed=7)
    trng = np.random.default_rng(1)
    for li in range(len(tiny.layers)):
        arr = tiny.layers[li][0]
        idx = tuple(int(trng.integers(d)) for d in arr.shape)
        arr[idx] += h
        lp, _ = loss_minibatch(tiny, cfg, y0, epoch_seed=7)
        arr[idx] -= 2 * h
        lm, _ = loss_minibatch(tiny, cfg, y0, epoch_seed=7)
        arr[idx] += h
        fd = (lp - lm) / (2 * h)
        if abs(fd) > 1e-8:
            ok &= abs(tgrads[li][0][idx] - fd) / abs(fd) < 1e-4
    # Monte-Carlo error scaling
    score = exact_score_field(VP, ORACLE_MEAN, ORACLE_VAR)
    x0 = np.array([0.4, -0.2])
    budgets = [1_000, 10_000, 100_000]
    ses = [
        log_density("sm", score, VP, x0, EstimateConfig(n_throws=n, seed=17)).std_error
        for n in budgets
    ]
    slope = float(np.polyfit(np.log(budgets), np.log(ses), 1)[0])
    ok &= abs(slope + 0.5) <= 0.05
    _report(10, "gradient and MC-error gate", ok, f"se slope {slope:.3f}")
