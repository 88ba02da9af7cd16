import csv

import numpy as np
import pytest
from scipy import optimize, stats
from scipy.special import expit, polygamma

from lsmgp import cavi, data
from lsmgp.augmentation import log_cosh_half, pg_sample
from lsmgp.kernel import KernelConfig, gram
from lsmgp.likelihood import predict_proba
from lsmgp.sparse import SparseGPState, interpolate, kl_divergence, latent_predictive

from conftest import wine_split


def problem(seed, N=30, C=3, D=2, M=10, iters=3, **kw):
    g = np.random.default_rng(seed)
    X = g.normal(size=(N, D))
    y = np.arange(N) % C
    X[:, :2] += 1.5 * np.column_stack([np.cos(2 * np.pi * y / C), np.sin(2 * np.pi * y / C)])
    cfg = cavi.TrainConfig(n_iterations=iters, minibatch_size=N, n_inducing=M, hyper_period=0, seed=seed, **kw)
    res = cavi.fit(X, y, cfg, n_classes=C)
    return X, y, cavi.one_hot(y, C), res


def test_rho_schedule():
    cfg = cavi.TrainConfig()
    assert cfg.rho(0) == 1.0
    assert cfg.rho(3) == pytest.approx(4**-0.6)
    with pytest.raises(ValueError):
        cavi.TrainConfig(inner_iters=0)


# -- moments --------------------------------------------------------------------

def test_second_moment_at_prior_inducing_input():
    Z = np.array([[0.0], [2.0]])
    st = SparseGPState.prior(Z, [KernelConfig(2.5, [1.0], 1e-9)], 2)
    _, fbar = cavi.expected_f_moments(st, interpolate(st, Z[:1]))
    np.testing.assert_allclose(fbar, np.sqrt(2.5), rtol=1e-6)


def test_second_moment_degenerate_case():
    Z = np.array([[0.0], [2.0]])
    st = SparseGPState.prior(Z, [KernelConfig(1.0, [1.0], 1e-9)], 2)
    st.mu[:] = [[1.5, -2.0], [-0.5, 0.3]]
    st.sigma[:] = 1e-14 * np.eye(2)
    mean, fbar = cavi.expected_f_moments(st, interpolate(st, Z))
    np.testing.assert_allclose(fbar, np.abs(mean), rtol=1e-6)
    assert np.all(fbar >= np.abs(mean))


def test_second_moment_matches_monte_carlo():
    X, y, y1h, res = problem(0)
    st = res.state
    cache = interpolate(st, X[:4])
    mean, fbar = cavi.expected_f_moments(st, cache)
    g = np.random.default_rng(1)
    n = 100_000
    for c in range(3):
        u = g.multivariate_normal(st.mu[c], st.sigma[c], size=n)
        f = u @ cache.kappa[0].T + np.sqrt(cache.ktilde[0]) * g.standard_normal((n, 4))
        sq = f**2
        se = sq.std(axis=0) / np.sqrt(n)
        assert np.all(np.abs(sq.mean(axis=0) - fbar[:, c] ** 2) < 3 * se)
        assert np.all(np.abs(f.mean(axis=0) - mean[:, c]) < 3 * f.std(axis=0) / np.sqrt(n))


# -- local updates ----------------------------------------------------------------

def test_local_invariants():
    X, y, y1h, res = problem(1)
    loc = res.local
    np.testing.assert_array_equal(loc.beta, 3.0)
    assert np.all(loc.alpha >= 1)
    np.testing.assert_allclose(loc.alpha, 1 + loc.gamma.sum(axis=1), rtol=1e-12)
    assert np.all(loc.gamma >= 0)
    theta = loc.theta(y1h)
    np.testing.assert_allclose(theta, (y1h + loc.gamma) / (2 * loc.b) * np.tanh(loc.b / 2), rtol=1e-12)


def test_count_rate_small_variance_limit():
    # with negligible latent variance the count rate is E[lam] sigma(-E f)
    Z = np.array([[0.0], [3.0]])
    st = SparseGPState.prior(Z, [KernelConfig(1.0, [1.0], 1e-9)], 2)
    st.mu[:] = [[2.0, -1.0], [-3.0, 0.5]]
    st.sigma[:] = 1e-16 * np.eye(2)
    loc = cavi.init_local(st, Z)
    cavi.update_local(st, loc, interpolate(st, Z), np.arange(2), inner_iters=1)
    from scipy.special import digamma
    expected = np.exp(digamma(2.0)) / 2 * expit(-st.mu.T)
    np.testing.assert_allclose(loc.gamma, expected, rtol=1e-6)


def _wine_initial(wine):
    tr, _ = wine_split(wine, 0)
    res = cavi.fit(tr.X, tr.y, cavi.TrainConfig(n_iterations=0, n_inducing=None),
                   kernels=[KernelConfig(0.5, np.full(13, 2.0))])
    return tr, res.state, res.local, interpolate(res.state, tr.X)


def test_inner_loop_fixed_point_after_five_rounds(wine):
    tr, st, loc, cache = _wine_initial(wine)
    idx = np.arange(tr.n)
    cavi.update_local(st, loc, cache, idx, inner_iters=5)
    a5 = loc.alpha.copy()
    cavi.update_local(st, loc, cache, idx, inner_iters=1)
    residual = float(np.max(np.abs(loc.alpha - a5) / a5))
    assert residual < 1e-6, f"relative change of alpha after one more round: {residual:.2e}"


def test_inner_loop_contracts_at_linearized_rate(wine):
    # alpha -> 1 + sum_c gamma_c(alpha) has slope (alpha* - 1) psi'(alpha*) at its fixed point
    tr, st, loc, cache = _wine_initial(wine)
    idx = np.arange(tr.n)
    star = cavi.update_local(st, loc.copy(), cache, idx, inner_iters=200).alpha
    errs = [np.abs(cavi.update_local(st, loc.copy(), cache, idx, inner_iters=k).alpha - star) for k in (8, 9)]
    rate = (star - 1) * polygamma(1, star)
    np.testing.assert_allclose(errs[1] / errs[0], rate, rtol=1e-3)
    assert rate.max() < 1


def test_local_update_maximizes_elbo_over_locals():
    X, y, y1h, res = problem(3, N=12, M=6)
    st, loc = res.state, res.local.copy()
    cache = interpolate(st, X)
    idx = np.arange(12)
    cavi.update_local(st, loc, cache, idx, inner_iters=300)
    base = cavi.elbo(st, loc, cache, idx, y1h)
    i = 5

    def neg(z):
        trial = loc.copy()
        trial.alpha[i] = np.exp(z[0])
        trial.gamma[i] = np.exp(z[1:4])
        trial.b[i] = np.exp(z[4:7])
        return -cavi.elbo(st, trial, cache, idx, y1h)

    z0 = np.concatenate([[np.log(loc.alpha[i])], np.log(loc.gamma[i]), np.log(loc.b[i])])
    best = optimize.minimize(neg, z0 + 0.3, method="BFGS", options={"gtol": 1e-10})
    assert -best.fun <= base + 1e-9
    np.testing.assert_allclose(np.exp(best.x), np.exp(z0), rtol=1e-4)


def test_local_update_reports_non_finite():
    X, y, y1h, res = problem(4)
    st = res.state
    st.mu[1, :] = np.nan
    with pytest.raises((FloatingPointError, ValueError)):
        cavi.update_local(st, res.local, interpolate(st, X), np.arange(X.shape[0]))


# -- global updates ----------------------------------------------------------------

def test_global_target_matches_dense_formula():
    X, y, y1h, res = problem(5)
    st, loc = res.state, res.local
    idx = np.arange(7, 22)
    cache = interpolate(st, X[idx])
    s = X.shape[0] / idx.size
    new = cavi.update_global(st.copy(), loc, cache, idx, y1h, rho=1.0, scale=s)
    k = cache.kappa[0]
    Kinv = np.linalg.inv(st.kmm(0))
    for c in range(3):
        theta = loc.theta(y1h, idx)[:, c]
        S = np.linalg.inv(s * k.T @ np.diag(theta) @ k + Kinv)
        m = 0.5 * S @ (s * k.T @ (y1h[idx, c] - loc.gamma[idx, c]))
        np.testing.assert_allclose(new.sigma[c], S, rtol=1e-7, atol=1e-9)
        np.testing.assert_allclose(new.mu[c], m, rtol=1e-7, atol=1e-9)


def test_global_update_without_evidence_recovers_prior():
    X, y, y1h, res = problem(6)
    st, loc = res.state.copy(), res.local.copy()
    loc.gamma[:] = y1h
    loc.b[:] = 1e13
    new = cavi.update_global(st, loc, interpolate(st, X), np.arange(X.shape[0]), y1h, rho=1.0)
    for c in range(3):
        np.testing.assert_allclose(new.sigma[c], st.kmm(c), atol=1e-9)
        np.testing.assert_allclose(new.mu[c], 0.0, atol=1e-12)


def test_global_update_idempotent():
    X, y, y1h, res = problem(7)
    st, loc = res.state.copy(), res.local
    cache = interpolate(st, X)
    idx = np.arange(X.shape[0])
    cavi.update_global(st, loc, cache, idx, y1h, 1.0)
    mu, sig = st.mu.copy(), st.sigma.copy()
    cavi.update_global(st, loc, cache, idx, y1h, 1.0)
    np.testing.assert_allclose(st.mu, mu, atol=1e-12)
    np.testing.assert_allclose(st.sigma, sig, atol=1e-12)


def test_blended_covariance_stays_spd():
    X, y, y1h, res = problem(8)
    st, loc = res.state.copy(), res.local
    for rho in (0.9, 0.3, 0.01):
        cavi.update_global(st, loc, interpolate(st, X[:5]), np.arange(5), y1h, rho, scale=6.0)
        for c in range(3):
            np.testing.assert_array_equal(st.sigma[c], st.sigma[c].T)
            np.linalg.cholesky(st.sigma[c])


# -- objective -------------------------------------------------------------------

def test_kl_vanishes_at_prior():
    X, y, y1h, res = problem(9, iters=0)
    assert all(abs(kl_divergence(res.state, c)) < 1e-9 for c in range(3))


def test_elbo_matches_monte_carlo_oracle():
    # E_q[log p(y, f, lam, n, w) - log q] estimated by sampling every latent;
    # Polya-Gamma densities enter only through their tilting ratio.
    g = np.random.default_rng(10)
    N, C = 3, 2
    X = g.normal(size=(N, 1))
    y = np.array([0, 1, 0])
    y1h = cavi.one_hot(y, C)
    res = cavi.fit(X, y, cavi.TrainConfig(n_iterations=3, minibatch_size=N, n_inducing=None, hyper_period=0),
                   kernels=[KernelConfig(1.5, [1.0], 1e-6)])
    st, loc = res.state, res.local
    loc.gamma *= 1.3
    loc.b *= 0.8
    loc.alpha += 0.4
    closed = cavi.elbo(st, loc, interpolate(st, X), np.arange(N), y1h)
    S = 400_000
    K = st.kmm(0)
    tot = np.zeros(S)
    fs = []
    for c in range(C):
        f = st.mu[c] + g.standard_normal((S, N)) @ np.linalg.cholesky(st.sigma[c]).T
        tot += stats.multivariate_normal(np.zeros(N), K).logpdf(f) - stats.multivariate_normal(st.mu[c], st.sigma[c]).logpdf(f)
        fs.append(f)
    lam = g.gamma(loc.alpha, 1 / loc.beta, size=(S, N))
    tot -= stats.gamma.logpdf(lam, loc.alpha, scale=1 / loc.beta).sum(axis=1)
    for c in range(C):
        n = g.poisson(loc.gamma[:, c], size=(S, N))
        h = y1h[:, c] + n
        w = pg_sample(h, np.broadcast_to(loc.b[:, c], (S, N)), g)
        f = fs[c]
        term = (stats.poisson.logpmf(n, lam) - stats.poisson.logpmf(n, loc.gamma[:, c])
                - h * log_cosh_half(loc.b[:, c]) + loc.b[:, c] ** 2 * w / 2
                - h * np.log(2) + (y1h[:, c] - n) * f / 2 - f**2 * w / 2)
        tot += term.sum(axis=1)
    assert abs(tot.mean() - closed) < 3 * tot.std() / np.sqrt(S)


def test_elbo_invariant_under_class_permutation():
    X, y, y1h, res = problem(11)
    perm = np.array([2, 0, 1])
    st2 = res.state.permute_classes(perm)
    loc2 = res.local.copy()
    loc2.gamma, loc2.b = loc2.gamma[:, perm], loc2.b[:, perm]
    a = cavi.full_elbo(res.state, res.local, X, y1h)
    b = cavi.full_elbo(st2, loc2, X, y1h[:, perm])
    assert a == pytest.approx(b, rel=1e-12)


def test_full_batch_elbo_monotone_on_toy():
    ds = data.gen_toy(50, 3, 0.3, seed=0)
    res = cavi.fit(ds.X, ds.y, cavi.TrainConfig(n_iterations=40, minibatch_size=50, n_inducing=20, hyper_period=0))
    e = np.array([r["elbo"] for r in res.trace])
    assert np.all(np.diff(e) >= -1e-8 * np.abs(e[1:]))


def test_negative_elbo_convex_along_lines():
    X, y, y1h, res = problem(12)
    st, loc = res.state, res.local
    cache = interpolate(st, X)
    idx = np.arange(X.shape[0])
    g = np.random.default_rng(0)
    t = np.linspace(-1, 1, 9)
    for _ in range(5):
        d = g.normal(size=st.M)
        vals = []
        for ti in t:
            s = st.copy()
            s.mu[1] = st.mu[1] + ti * d
            vals.append(-cavi.elbo(s, loc, cache, idx, y1h))
        assert np.all(np.diff(vals, 2) >= -1e-8)
        A = g.normal(size=(st.M, st.M))
        S1 = A @ A.T / st.M + 0.05 * np.eye(st.M)
        vals = []
        for ti in np.linspace(0, 1, 9):
            s = st.copy()
            s.sigma[1] = (1 - ti) * st.sigma[1] + ti * S1
            vals.append(-cavi.elbo(s, loc, cache, idx, y1h))
        assert np.all(np.diff(vals, 2) >= -1e-8)


# -- hyperparameters ------------------------------------------------------------------

def _fd_gradient(st, loc, X, idx, y1h, grp, h=1e-5):
    theta = st.kernels[grp].log_params
    out = np.empty_like(theta)
    for j in range(theta.size):
        vals = []
        for sgn in (1, -1):
            s = st.copy()
            tp = theta.copy()
            tp[j] += sgn * h
            s.kernels[grp] = s.kernels[grp].with_log_params(tp)
            s.refresh()
            vals.append(cavi.elbo(s, loc, interpolate(s, X[idx]), idx, y1h))
        out[j] = (vals[0] - vals[1]) / (2 * h)
    return out


@pytest.mark.parametrize("shared", [True, False])
def test_hyper_gradient_matches_finite_differences(shared):
    X, y, y1h, res = problem(13, N=20, M=8, shared_hyper=shared)
    st, loc = res.state, res.local
    idx = np.arange(20)
    grads = cavi.hyper_gradient(st, loc, X, idx, y1h)
    for grp in range(len(st.kernels)):
        fd = _fd_gradient(st, loc, X, idx, y1h, grp)
        np.testing.assert_allclose(grads[grp], fd, rtol=1e-4, atol=1e-6 * np.abs(fd).max())


def test_adam_zero_gradient_and_first_step():
    opt = cavi.Adam(lr=0.05)
    p = np.array([0.3, -1.0])
    np.testing.assert_array_equal(opt.step(p, np.zeros(2)), p)
    opt = cavi.Adam(lr=0.05)
    g = np.array([2.0, -1e-3])
    step = opt.step(p, g) - p
    assert np.all(np.sign(step) == np.sign(g))
    assert np.all(np.abs(step) <= 0.05 + 1e-12)


def test_hyper_step_moves_uphill_and_refreshes():
    X, y, y1h, res = problem(14, N=20, M=8)
    st, loc = res.state.copy(), res.local
    idx = np.arange(20)
    before = cavi.full_elbo(st, loc, X, y1h)
    cavi.hyper_step(st, loc, X, idx, y1h, [cavi.Adam(1e-3)])
    assert cavi.full_elbo(st, loc, X, y1h) > before
    np.testing.assert_allclose(st.kmm(0), gram(st.kernels[0], st.Z))


# -- orchestration ---------------------------------------------------------------------

def test_zero_iterations_returns_initialization():
    X, y, y1h, res = problem(15, iters=0)
    state, local, _ = cavi.initialize(X, y, cavi.TrainConfig(n_inducing=10, seed=15), 3)
    np.testing.assert_array_equal(res.state.mu, state.mu)
    np.testing.assert_array_equal(res.state.sigma, state.sigma)
    np.testing.assert_array_equal(res.local.gamma, local.gamma)
    assert res.trace == []


def test_fit_is_deterministic(tmp_path):
    ds = data.gen_toy(120, 3, 0.5, seed=3)
    cfg = cavi.TrainConfig(n_iterations=15, minibatch_size=40, n_inducing=25, hyper_period=5, seed=9)
    a, b = cavi.fit(ds.X, ds.y, cfg), cavi.fit(ds.X, ds.y, cfg)
    np.testing.assert_array_equal(a.state.mu, b.state.mu)
    cavi.write_trace_csv(tmp_path / "a.csv", a.trace, wall_time=False)
    cavi.write_trace_csv(tmp_path / "b.csv", b.trace, wall_time=False)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_trace_columns_and_optional_fields(tmp_path):
    ds = data.gen_toy(90, 3, 0.5, seed=4)
    te = data.gen_toy(30, 3, 0.5, seed=5)
    res = cavi.fit(ds.X, ds.y, cavi.TrainConfig(n_iterations=4, minibatch_size=30, n_inducing=20, eval_every=2,
                                                  mc_samples=50), X_test=te.X, y_test=te.y)
    cavi.write_trace_csv(tmp_path / "t.csv", res.trace)
    rows = list(csv.DictReader(open(tmp_path / "t.csv")))
    assert tuple(rows[0].keys()) == cavi.TRACE_COLUMNS
    assert rows[0]["test_error"] == "" and rows[1]["test_error"] != ""
    assert all(r["wall_time_s"] != "" for r in rows)


def test_separated_toy_converges_within_200_iterations():
    ds = data.gen_toy(500, 3, 0.0, seed=0)
    res = cavi.fit(ds.X, ds.y, cavi.TrainConfig(n_iterations=200, minibatch_size=500, hyper_period=0))
    e = np.array([r["elbo"] for r in res.trace])
    rel = np.abs(np.diff(e)) / np.abs(e[1:])
    assert rel.min() < 1e-6
    assert res.state.M == 3


def test_class_permutation_equivariance():
    ds = data.gen_toy(60, 3, 0.3, seed=6)
    perm = np.array([1, 2, 0])
    inv = np.argsort(perm)
    cfg = cavi.TrainConfig(n_iterations=10, minibatch_size=60, n_inducing=15, hyper_period=0)
    a = cavi.fit(ds.X, ds.y, cfg)
    b = cavi.fit(ds.X, inv[ds.y], cfg)
    np.testing.assert_allclose(b.state.mu, a.state.mu[perm], atol=1e-10)
    np.testing.assert_allclose(b.state.sigma, a.state.sigma[perm], atol=1e-10)


def test_all_classes_subsample_is_bitwise_standard():
    ds = data.gen_toy(80, 4, 0.4, seed=7)
    common = dict(n_iterations=6, minibatch_size=20, n_inducing=15, hyper_period=3, seed=2)
    a = cavi.fit(ds.X, ds.y, cavi.TrainConfig(**common))
    b = cavi.fit_extreme(ds.X, ds.y, cavi.TrainConfig(class_subsample=4, **common))
    np.testing.assert_array_equal(a.state.mu, b.state.mu)
    np.testing.assert_array_equal(a.state.sigma, b.state.sigma)
    np.testing.assert_array_equal(a.local.alpha, b.local.alpha)
    assert [r["elbo"] for r in a.trace] == [r["elbo"] for r in b.trace]


def test_subsampled_alpha_estimator_unbiased():
    g = np.random.default_rng(3)
    C, K, draws = 10, 3, 10_000
    gamma = g.gamma(2.0, 0.3, size=C)
    est = np.array([1 + C / K * gamma[g.choice(C, K, replace=False)].sum() for _ in range(draws)])
    assert abs(est.mean() - (1 + gamma.sum())) < 3 * est.std() / np.sqrt(draws)


def test_subsampled_local_update_uses_scaled_estimator():
    ds = data.gen_toy(40, 5, 0.4, seed=8)
    res = cavi.fit(ds.X, ds.y, cavi.TrainConfig(n_iterations=2, minibatch_size=40, n_inducing=10, hyper_period=0))
    st, loc = res.state, res.local.copy()
    classes = np.array([1, 3])
    idx = np.arange(40)
    cavi.update_local(st, loc, interpolate(st, ds.X), idx, inner_iters=5, classes=classes)
    np.testing.assert_allclose(loc.alpha, 1 + 5 / 2 * loc.gamma[:, classes].sum(axis=1), rtol=1e-12)
    with pytest.raises(ValueError):
        cavi.fit_extreme(ds.X, ds.y, cavi.TrainConfig(class_subsample=6, n_iterations=1))


def test_wine_full_gp_accuracy(wine):
    accs = []
    for seed in range(10):
        tr, te = wine_split(wine, seed)
        res = cavi.fit(tr.X, tr.y, cavi.TrainConfig(n_iterations=100, minibatch_size=tr.n, n_inducing=None,
                                                     hyper_period=0, elbo_every=0, seed=seed),
                       kernels=[KernelConfig(0.5, np.full(13, 2.0))])
        p = predict_proba(*latent_predictive(res.state, te.X), rng=seed)
        accs.append(np.mean(p.argmax(axis=1) == te.y))
    assert abs(np.mean(accs) - 0.96) <= 0.03
