"""Acceptance suite: one test per release criterion, one printed verdict line
each. The two statistical reproductions (rate and speedup) run full-scale
deterministic seed grids and take a few minutes between them; everything else
is exact or fast."""

import numpy as np
from numpy.random import Generator, Philox

from stormdist import (
    B_CUBED_MIN,
    adaptive_step,
    derive_params,
    fd_check,
    fit_slope,
    init_state,
    make_problem,
    run_adstorm,
    run_dsgd,
    run_dstorm,
)
from stormdist.harness import parse_config, run_cells
from stormdist.problems import sample_region_point
from stormdist.runtime import THREADS_ENV_VAR


def _verdict(num, name, detail):
    print(f"criterion {num} ({name}): PASS - {detail}")


def test_criterion_1_sgd_endpoint_equivalence():
    spec = make_problem("het_quadratic", 10, 4, noise_std=1.0, seed=41)
    p = derive_params(4, spec.L, 1.0)
    storm = run_dstorm(spec, p, 100, master_seed=17, force_a_one=True)
    sgd = run_dsgd(spec, 100, 17, params=p)
    assert storm.final_x.tobytes() == sgd.final_x.tobytes()
    assert storm.x_out.tobytes() == sgd.x_out.tobytes()
    assert storm.x_out_round == sgd.x_out_round
    for ra, rb in zip(storm.metrics, sgd.metrics):
        assert (ra.t, ra.eta, ra.a, ra.grad_norm, ra.f_val, ra.err_norm, ra.potential) == (
            rb.t,
            rb.eta,
            rb.a,
            rb.grad_norm,
            rb.f_val,
            rb.err_norm,
            rb.potential,
        )
    _verdict(1, "unit-momentum equals the SGD baseline", "100 rounds bitwise equal, K=4 d=10")


def test_criterion_2_noise_free_exactness():
    worst = 0.0
    for family in ("het_quadratic", "sigmoid_quadratic"):
        for K in (1, 8):
            spec = make_problem(family, 10, K, noise_std=0.0, seed=42)
            p = derive_params(K, spec.L, 1.0)
            for runner in (run_dstorm, run_adstorm):
                res = runner(spec, p, 1000, master_seed=0)
                assert len(res.metrics) == 1000
                worst = max(worst, max(r.err_norm for r in res.metrics))
    assert worst <= 1e-10
    _verdict(2, "zero noise keeps the direction exact", f"max err_norm {worst:.3e} <= 1e-10")


def test_criterion_3_initial_error_second_moment():
    sigma = 1.0
    trials = 2000
    details = []
    for K in (1, 4, 16):
        spec = make_problem("het_quadratic", 20, K, noise_std=sigma, seed=43)
        p = derive_params(K, spec.L, sigma)
        total = 0.0
        for trial in range(trials):
            res = run_dstorm(spec, p, 1, master_seed=trial)
            total += res.metrics[0].err_norm ** 2
        mean = total / trials
        bound = 1.2 * sigma**2 / K
        assert mean <= bound, f"K={K}: mean ||e_1||^2 = {mean:.4f} > {bound:.4f}"
        details.append(f"K={K}: {mean:.4f} <= {bound:.4f}")
    _verdict(3, "initial error second moment", "; ".join(details))


def test_criterion_4_schedule_safety_fuzz():
    rng = Generator(Philox(key=44))
    param_draws = 1000
    sequences_per_draw = 10
    steps = 64
    checked = 0
    for _ in range(param_draws):
        k = int(rng.integers(1, 129))
        L = float(rng.uniform(0.1, 10.0))
        noise = float(10.0 ** rng.uniform(-2.0, 2.0))
        b = float((B_CUBED_MIN * 10.0 ** rng.uniform(0.0, 2.0)) ** (1.0 / 3.0))
        alpha = float(rng.uniform(1.0 / 3.0, 1.0))
        p = derive_params(k, L, noise, b=b, alpha=alpha)
        cap_l = 1.0 / p.L * (1.0 + 1e-12)
        cap_c = p.L / p.c * (1.0 + 1e-12)
        for _ in range(sequences_per_draw):
            s = init_state(p)
            assert s.eta <= cap_l and s.eta <= cap_c
            for _ in range(steps):
                feedback = 0.0 if rng.uniform() < 0.05 else float(10.0 ** rng.uniform(-4.0, 4.0))
                nxt = adaptive_step(s, p, feedback)
                assert nxt.eta <= cap_l, f"eta {nxt.eta} broke 1/L cap for {p}"
                assert nxt.eta <= cap_c, f"eta {nxt.eta} broke L/c cap for {p}"
                assert nxt.eta <= s.eta * (1.0 + 1e-15), "eta increased"
                assert nxt.w <= s.w * (1.0 + 1e-15), "w increased"
                assert 0.0 < nxt.a_next <= 1.0
                s = nxt
                checked += 1
    assert checked == param_draws * sequences_per_draw * steps
    _verdict(
        4,
        "schedule safety under fuzzing",
        f"{param_draws} parameter draws x {sequences_per_draw} sequences, zero violations",
    )


def test_criterion_5_accounting_exactness():
    for K in (1, 2, 8):
        for d in (1, 10, 100):
            spec = make_problem("het_quadratic", d, K, noise_std=1.0, seed=45)
            p = derive_params(K, spec.L, 1.0)
            for T in (1, 10):
                dstorm = run_dstorm(spec, p, T, master_seed=0)
                adstorm = run_adstorm(spec, p, T, master_seed=0)
                for res in (dstorm, adstorm):
                    assert res.accounting.ifo_per_worker == 1 + 2 * T
                    assert [r.ifo_per_worker for r in res.metrics] == [
                        1 + 2 * t for t in range(1, T + 1)
                    ]
                vec = 16 + 8 * d
                prev_delta = None
                for rd, ra in zip(dstorm.metrics, adstorm.metrics):
                    assert rd.bytes_up == (rd.t + 1) * K * vec
                    assert rd.bytes_down == (rd.t + 1) * K * vec
                    delta = (ra.bytes_up + ra.bytes_down) - (rd.bytes_up + rd.bytes_down)
                    assert delta == rd.t * 2 * K * 24
                    if prev_delta is not None:
                        assert delta - prev_delta == 2 * K * 24
                    prev_delta = delta
    _verdict(
        5,
        "oracle and byte accounting",
        "IFO = 1+2T; adaptive feedback adds exactly 2K*24 bytes per round",
    )


def test_criterion_6_rate_reproduction():
    spec = make_problem("het_quadratic", 20, 1, noise_std=1.0, seed=100)
    p = derive_params(1, spec.L, 1.0)
    horizons = (1000, 3000, 10000, 30000, 100000)
    means = []
    for T in horizons:
        per_seed = []
        for seed in range(10):
            res = run_dstorm(spec, p, T, master_seed=seed)
            per_seed.append(float(np.mean([r.grad_norm for r in res.metrics])))
        means.append(float(np.mean(per_seed)))
    slope, _ = fit_slope(np.array(horizons, dtype=np.float64), means)
    assert -0.48 <= slope <= -0.20, f"slope {slope:.4f} outside [-0.48, -0.20]"
    _verdict(
        6,
        "horizon dependence of the averaged gradient norm",
        f"log-log slope {slope:.4f} in [-0.48, -0.20] over T=1e3..1e5, 10 seeds",
    )


def test_criterion_7_linear_speedup():
    d, T = 20, 10000
    center = np.linspace(-2.0, 2.0, d)
    k_grid = (1, 4, 16, 64)
    means = {}
    for K in k_grid:
        spec = make_problem(
            "het_quadratic", d, K, centers=np.tile(center, (K, 1)), noise_std=1.0
        )
        # b = 0.5 with sigma-scaled feedback keeps w0 small enough that every
        # K reaches its asymptotic floor within the fixed budget
        p = derive_params(K, spec.L, 1.0, b=0.5)
        vals = []
        for seed in range(10):
            res = run_adstorm(spec, p, T, master_seed=seed)
            vals.append(min(r.grad_norm for r in res.metrics))
        means[K] = float(np.mean(vals))
    for small, large in zip(k_grid, k_grid[1:]):
        assert means[small] >= means[large], (
            f"min grad norm rose from K={small} ({means[small]:.5f}) "
            f"to K={large} ({means[large]:.5f})"
        )
    ratio = means[1] / means[64]
    assert ratio >= 2.0, f"K=1 / K=64 ratio {ratio:.3f} < 2.0"
    _verdict(
        7,
        "worker scaling lowers the best gradient norm",
        "means "
        + ", ".join(f"K={k}: {means[k]:.5f}" for k in k_grid)
        + f"; ratio {ratio:.3f} >= 2.0",
    )


def test_criterion_8_determinism_across_execution_modes(tmp_path, monkeypatch):
    configs = [
        {
            "problem": {"family": "het_quadratic", "d": 6, "k": 4, "sigma": 1.0, "seed": 46},
            "algo": "adstorm",
            "T": 200,
            "seeds": 2,
            "threads": 4,
        },
        {
            "problem": {
                "family": "sigmoid_quadratic",
                "d": 5,
                "k": 8,
                "sigma": 0.5,
                "lambda": 1.0,
                "seed": 47,
            },
            "algo": "dstorm",
            "T": 200,
            "seeds": 2,
            "threads": 8,
        },
        {
            "problem": {"family": "het_quadratic", "d": 3, "k": 2, "sigma": 1.0, "seed": 48},
            "algo": "dsgd",
            "T": 200,
            "seeds": 2,
            "threads": 2,
        },
    ]
    compared = 0
    for i, raw in enumerate(configs):
        cfg = parse_config(raw)
        par_dir = tmp_path / f"par{i}"
        ser_dir = tmp_path / f"ser{i}"
        monkeypatch.delenv(THREADS_ENV_VAR, raising=False)
        run_cells(cfg, str(par_dir), parallel=True)
        monkeypatch.setenv(THREADS_ENV_VAR, "1")
        run_cells(cfg, str(ser_dir), parallel=False)
        monkeypatch.delenv(THREADS_ENV_VAR)
        names = sorted(f.name for f in par_dir.iterdir())
        assert names == sorted(f.name for f in ser_dir.iterdir()) and names
        for name in names:
            assert (par_dir / name).read_bytes() == (ser_dir / name).read_bytes(), (
                f"config {i}: {name} differs between execution modes"
            )
            compared += 1
    _verdict(
        8,
        "parallel and sequential runs write identical files",
        f"{compared} files byte-identical across 3 configs",
    )


def test_criterion_9_gradient_oracle():
    worst = 0.0
    for family in ("het_quadratic", "sigmoid_quadratic"):
        spec = make_problem(family, 10, 3, noise_std=1.0, seed=49)
        rng = Generator(Philox(key=1009))
        for _ in range(100):
            worst = max(worst, fd_check(spec, sample_region_point(spec, rng)))
    assert worst <= 1e-5
    _verdict(
        9,
        "finite differences confirm the gradients",
        f"max relative error {worst:.3e} <= 1e-5 over 100 points per family",
    )
