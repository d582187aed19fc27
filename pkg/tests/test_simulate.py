"""Tests for the particle Monte Carlo against exact statistical oracles."""

import math
import os

import numpy as np
import pytest
from scipy import stats

from rdito.grid import FieldGrid, POSITION
from rdito.models import (
    ModelSpec,
    Rate,
    birth_death_timedep_density,
    brownian_tree_density,
    convert_ab_densities,
    death_diffusion_density,
    death_diffusion_log_gf,
    GFQuery,
    spont_birth_density,
    wrapped_gaussian,
)
from rdito.simulate import (
    EstimatorReport,
    ParticleEnsemble,
    RadialKernel,
    SimConfig,
    SimError,
    StepTooLarge,
    run,
    sample_initial,
    step,
)

L, N = 10.0, 64


def make_grid(values=None):
    g = FieldGrid((L,), np.zeros(N), POSITION)
    return g if values is None else g.with_values(values)


def gauss_spec(kind="DeathDiffusion", mu=1.0, D=1.0, mass=20.0, rates=None):
    g = make_grid()
    v = g.with_values(wrapped_gaussian(g, mass, 1.0, L / 2))
    return ModelSpec(kind, (L,), D, rates or {"mu": Rate(const=mu)}, v)


def cell_averaged(kind, t, refine=4, **kw):
    """Analytic density block-averaged over estimator cells (the histogram
    estimates cell averages, not midpoint values)."""
    fine = FieldGrid((L,), np.zeros(N * refine), POSITION)
    mass = kw.get("mass", 20.0)
    vf = fine.with_values(wrapped_gaussian(fine, mass, 1.0, L / 2))
    spec = ModelSpec(kind, (L,), kw.get("D", 1.0),
                     {"mu": Rate(const=kw.get("mu", 1.0))}, vf)
    if kind == "DeathDiffusion":
        dens = death_diffusion_density(spec, t)
    else:
        dens = brownian_tree_density(spec, t)
    return dens.values.reshape(N, refine).mean(axis=1)


def zscores(report, ref_values, t_ignored=None):
    """z per cell with an SE floor from the analytic Poisson prediction."""
    dV = report.mean_field.cell_volume
    pred_se = np.sqrt(np.maximum(ref_values, 0) * dV / report.replicas) / dV
    se = np.maximum(report.se_field.values, pred_se)
    return (report.mean_field.values - ref_values) / np.maximum(se, 1e-300)


class TestSampleInitial:
    def test_empty_for_zero_intensity(self):
        spec = ModelSpec("DeathDiffusion", (L,), 1.0, {"mu": Rate(const=1.0)},
                         make_grid(np.zeros(N)))
        rng = np.random.default_rng(0)
        ens = sample_initial(spec, rng, replicas=50)
        assert ens.n == 0

    def test_poisson_counts_chisquare(self):
        spec = ModelSpec("DeathDiffusion", (L,), 1.0, {"mu": Rate(const=1.0)},
                         make_grid(np.full(N, 0.8)))
        lam = 0.8 * L
        rng = np.random.default_rng(21)
        counts = np.array([sample_initial(spec, rng).n for _ in range(10_000)])
        kmax = int(stats.poisson.ppf(0.9999, lam)) + 1
        obs = np.bincount(np.minimum(counts, kmax), minlength=kmax + 1)
        exp = np.append(stats.poisson.pmf(np.arange(kmax), lam),
                        1 - stats.poisson.cdf(kmax - 1, lam))
        keep = exp * len(counts) > 5
        exp_k = exp[keep] / exp[keep].sum() * obs[keep].sum()
        chi2, p = stats.chisquare(obs[keep], exp_k)
        assert p > 0.01

    def test_gaussian_positions_ks(self):
        spec = gauss_spec(mass=10_000.0)
        rng = np.random.default_rng(2)
        ens = sample_initial(spec, rng)
        xs = ens.positions[:, 0]
        res = stats.kstest(xs, lambda x: stats.norm.cdf(x, L / 2, 1.0))
        assert res.pvalue > 0.01


class TestStep:
    def test_static_no_reactions_unchanged(self):
        spec = gauss_spec(mu=0.0, D=0.0)
        rng = np.random.default_rng(3)
        ens = sample_initial(spec, rng)
        pos = ens.positions.copy()
        step(ens, spec, SimConfig(dt=0.01, replicas=1, seed=0), rng)
        assert np.array_equal(ens.positions, pos)

    def test_pure_death_survival(self):
        mu, t, dt = 1.3, 0.5, 0.005
        spec = ModelSpec("DeathDiffusion", (L,), 0.0, {"mu": Rate(const=mu)},
                         make_grid(np.full(N, 100_000 / L)))
        rng = np.random.default_rng(4)
        ens = sample_initial(spec, rng)
        n0 = ens.n
        sim = SimConfig(dt=dt, replicas=1, seed=0)
        for _ in range(int(round(t / dt))):
            step(ens, spec, sim, rng)
        # per-step survival under thinning is exactly (1 - mu dt)^steps
        p = (1 - mu * dt) ** int(round(t / dt))
        se = math.sqrt(n0 * p * (1 - p))
        assert abs(ens.n - n0 * p) < 3 * se
        # and the thinning bias against e^{-mu t} is below 3 SE too
        pe = math.exp(-mu * t)
        assert abs(ens.n - n0 * pe) < 3 * math.sqrt(n0 * pe * (1 - pe)) + n0 * abs(p - pe)

    def test_pure_diffusion_msd(self):
        D, dt, steps = 0.5, 0.01, 20
        spec = ModelSpec("DeathDiffusion", (L,), D, {"mu": Rate(const=0.0)},
                         make_grid(np.full(N, 50_000 / L)))
        rng = np.random.default_rng(5)
        ens = sample_initial(spec, rng)
        start = ens.positions.copy()
        sim = SimConfig(dt=dt, replicas=1, seed=0)
        for _ in range(steps):
            step(ens, spec, sim, rng)
        dx = ens.positions - start
        dx -= L * np.round(dx / L)
        msd = float(np.mean(dx ** 2))
        t = dt * steps
        expect = 2 * D * t
        se = float(np.std(dx ** 2, ddof=1) / math.sqrt(ens.n))
        assert abs(msd - expect) < 3 * se

    def test_step_too_large(self):
        spec = gauss_spec(mu=50.0)
        rng = np.random.default_rng(6)
        ens = sample_initial(spec, rng)
        with pytest.raises(StepTooLarge):
            step(ens, spec, SimConfig(dt=0.01, replicas=1, seed=0), rng)


class TestRun:
    def test_gf_at_one_is_exactly_one(self):
        spec = gauss_spec(mass=5.0)
        sim = SimConfig(dt=0.05, replicas=64, seed=9)
        rep = run(spec, sim, 0.2, u=make_grid(np.ones(N)))
        assert rep.scalars["gf"] == (1.0, 0.0)

    def test_determinism(self):
        spec = gauss_spec(mass=5.0)
        sim = SimConfig(dt=0.05, replicas=300, seed=123, chunk=64)
        r1 = run(spec, sim, 0.3)
        r2 = run(spec, sim, 0.3)
        assert np.array_equal(r1.mean_field.values, r2.mean_field.values)
        assert r1.scalars == r2.scalars

    def test_thread_count_does_not_change_results(self):
        spec = gauss_spec(mass=5.0)
        sim = SimConfig(dt=0.05, replicas=300, seed=123, chunk=64)
        old = os.environ.get("RD_THREADS")
        try:
            os.environ["RD_THREADS"] = "1"
            r1 = run(spec, sim, 0.3)
            os.environ["RD_THREADS"] = "4"
            r4 = run(spec, sim, 0.3)
        finally:
            if old is None:
                os.environ.pop("RD_THREADS", None)
            else:
                os.environ["RD_THREADS"] = old
        assert np.array_equal(r1.mean_field.values, r4.mean_field.values)
        assert r1.scalars == r4.scalars

    def test_death_diffusion_density_matches_closed_form(self):
        spec = gauss_spec()
        t = 0.5
        sim = SimConfig(dt=0.005, replicas=4000, seed=7)
        rep = run(spec, sim, t)
        ref = cell_averaged("DeathDiffusion", t)
        z = zscores(rep, ref)
        assert np.mean(np.abs(z) > 3) <= 0.02

    def test_death_diffusion_gf_matches_closed_form(self):
        spec = gauss_spec()
        t = 0.4
        g = spec.grid()
        u = g.with_values(1 - 0.4 * np.exp(-((g.axes()[0] - 5) ** 2) / 4))
        sim = SimConfig(dt=0.01, replicas=4000, seed=8)
        rep = run(spec, sim, t, u=u)
        mean, se = rep.scalars["gf"]
        ref = math.exp(death_diffusion_log_gf(spec, GFQuery(u=u, t=t)))
        assert abs(mean - ref) < 3 * se

    def test_dt_convergence(self):
        spec = gauss_spec()
        t = 0.4
        rep1 = run(spec, SimConfig(dt=0.02, replicas=3000, seed=11), t)
        rep2 = run(spec, SimConfig(dt=0.01, replicas=3000, seed=12), t)
        m1, s1 = rep1.scalars["N"]
        m2, s2 = rep2.scalars["N"]
        assert abs(m1 - m2) < 3 * math.hypot(s1, s2)

    def test_brownian_tree_vs_series(self):
        spec = gauss_spec(kind="BrownianTree", mu=0.5, D=1.0, mass=10.0)
        t = 0.4
        rep = run(spec, SimConfig(dt=0.005, replicas=3000, seed=13), t)
        ref = cell_averaged("BrownianTree", t, mu=0.5, mass=10.0)
        z = zscores(rep, ref)
        assert np.mean(np.abs(z) > 3) <= 0.02
        m, s = rep.scalars["N"]
        assert abs(m - brownian_tree_density(spec, t).integral()) < 3 * s

    def test_convert_ab(self):
        g = make_grid()
        va = g.with_values(wrapped_gaussian(g, 8.0, 1.0, 4.0))
        vb = g.with_values(np.full(N, 0.2))
        x = g.axes()[0]
        prof = 1 + np.sin(2 * np.pi * x / L) ** 2
        spec = ModelSpec("ConvertAB", (L,), 0.0,
                         {"mu": Rate(const=0.5, table=tuple(prof))}, va, vb=vb)
        t = 0.8
        rep = run(spec, SimConfig(dt=0.01, replicas=3000, seed=14), t)
        xa, xb = convert_ab_densities(spec, t)
        za = zscores(rep, xa.values)
        assert np.mean(np.abs(za) > 3) <= 0.02
        dV = g.cell_volume
        predb = np.sqrt(np.maximum(xb.values, 0) * dV / rep.replicas) / dV
        seb = np.maximum(rep.fields["density_b_se"].values, predb)
        zb = (rep.fields["density_b"].values - xb.values) / seb
        assert np.mean(np.abs(zb) > 3) <= 0.02

    def test_spont_birth(self):
        g = make_grid()
        v = g.with_values(np.full(N, 0.4))
        x = g.axes()[0]
        gprof = 0.5 + 0.5 * np.cos(2 * np.pi * x / L) ** 2
        spec = ModelSpec("SpontBirth", (L,), 0.0,
                         {"mu": Rate(table=tuple(gprof), time="sin2")}, v)
        t = 1.5
        rep = run(spec, SimConfig(dt=0.01, replicas=2000, seed=15), t)
        ref = spont_birth_density(spec, t)
        m, s = rep.scalars["N"]
        assert abs(m - ref.integral()) < 3 * s
        z = zscores(rep, ref.values)
        assert np.mean(np.abs(z) > 3) <= 0.02

    def test_birth_death_timedep(self):
        g = make_grid()
        v = g.with_values(np.full(N, 2.0))
        mu, nu, t = 0.7, 1.3, 0.9
        spec = ModelSpec("BirthDeathTimeDep", (L,), 0.0,
                         {"mu": Rate(const=mu), "nu": Rate(const=nu)}, v)
        rep = run(spec, SimConfig(dt=0.005, replicas=2000, seed=16), t)
        ref = birth_death_timedep_density(spec, t)
        m, s = rep.scalars["N"]
        assert abs(m - ref.integral()) < 3 * s

    def test_annihilation_monotone_and_deterministic(self):
        g = make_grid()
        v = g.with_values(np.full(N, 3.0))
        spec = ModelSpec("Annihilation", (L,), 0.5, {}, v)
        kern = RadialKernel(cutoff=0.5, samples=(2.0, 2.0, 2.0, 2.0, 0.0))
        sim = SimConfig(dt=0.01, replicas=200, seed=17, kernel=kern)
        r1 = run(spec, sim, 0.3)
        r2 = run(spec, sim, 0.3)
        assert r1.scalars == r2.scalars
        assert r1.scalars["N"][0] < 30.0  # started at E N = 30, must decrease

    def test_annihilation_needs_kernel(self):
        g = make_grid()
        spec = ModelSpec("Annihilation", (L,), 0.5, {}, g.with_values(np.ones(N)))
        rng = np.random.default_rng(0)
        ens = sample_initial(spec, rng)
        with pytest.raises(SimError):
            step(ens, spec, SimConfig(dt=0.01, replicas=1, seed=0), rng)

    def test_report_serialization(self):
        spec = gauss_spec(mass=3.0)
        rep = run(spec, SimConfig(dt=0.05, replicas=32, seed=18), 0.1)
        js = rep.scalars_json()
        assert '"replicas": 32' in js
        csv = rep.grid_csv()
        assert csv.startswith("name,index,value")
