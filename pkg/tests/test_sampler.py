"""Gibbs/Metropolis sampler tests against closed-form and quadrature oracles."""

import math
import os

import numpy as np
import pytest

from treeshrink import measurement as ms
from treeshrink import model as md
from treeshrink import sampler as sp
from treeshrink import transform as tf
from treeshrink.randmath import RngHandle, gig_mean, gig_mode

import _oracles

DATA = os.path.join(os.path.dirname(os.path.abspath(__file__)), "data")


def tiny_layout():
    return tf.TreeLayout("daub4", 4, 4, 2, (1, 1), [(1, 1), (2, 2)])


def make_fixed_state(layout, alpha0=1.0, tau=1.0, tau0=1.0, alpha=1.0,
                     structure="tree"):
    """State with every shrinkage variable pinned to given constants."""
    hyper = md.Hyperparameters()
    shr = md.ShrinkageState(
        structure=structure,
        gamma={b: [np.full(layout.level_shape(l), 1.0 / layout.level_size(l))
                   for l in range(1, layout.levels + 1)] for b in layout.bands},
        gamma_tilde={b: [np.full(layout.level_shape(l),
                                 1.0 / layout.level_size(l))
                         for l in range(1, layout.levels + 1)]
                     for b in layout.bands},
        alpha={b: [np.full(layout.level_shape(l), alpha)
                   for l in range(1, layout.levels + 1)] for b in layout.bands},
        tau=np.full(layout.levels, tau),
        tau0=tau0,
    )
    pyr = tf.unflatten(np.zeros(layout.n), layout)
    return md.ModelState(layout, pyr, shr, md.NoiseState(alpha0=alpha0), hyper)


# ---------------------------------------------------------------------------
# update_x


def test_update_x_infinite_shrinkage():
    op = ms.make_identity_operator((8, 8), levels=2)
    state = make_fixed_state(op.layout, alpha0=1.0, tau=1e14, tau0=1e14,
                             alpha=1.0)
    y = np.ones(64)
    rng = RngHandle(0)
    for _ in range(5):
        sp.update_x(state, y, op, rng)
    assert np.max(np.abs(sp._flat_x(state))) < 1e-5


def test_update_x_likelihood_only():
    # identity measurements with zero prior precision: conditional is
    # N(analyze(y)_k, 1/alpha0) exactly
    op = ms.make_identity_operator((8, 8), levels=2)
    alpha0 = 4.0
    state = make_fixed_state(op.layout, alpha0=alpha0, tau=0.0, tau0=0.0)
    y = np.linspace(-1, 1, 64)
    z = op.analyze(y.reshape(8, 8))
    rng = RngHandle(1)
    draws = np.empty((4000, 64))
    for t in range(draws.shape[0]):
        sp.update_x(state, y, op, rng)
        draws[t] = sp._flat_x(state)
    assert np.max(np.abs(draws.mean(axis=0) - z)) < 4.0 * 0.5 / math.sqrt(4000)
    assert np.allclose(draws.var(axis=0), 1.0 / alpha0, rtol=0.15)


def test_update_x_matches_gaussian_posterior():
    # small dense problem with every other variable pinned: the x-sweep is a
    # Gibbs sampler on a single Gaussian whose moments are known in closed
    # form
    layout = tf.build_wavelet_tree_layout(4, 4, 1)
    rng_np = np.random.default_rng(2)
    H = rng_np.normal(size=(8, 16))
    op = ms.SensingOperator("dense-gaussian", layout, "daub4", H=H)
    alpha0, tau = 2.0, 0.5
    state = make_fixed_state(layout, alpha0=alpha0, tau=tau, tau0=tau)
    x_true = np.zeros(16)
    x_true[[0, 5]] = (1.0, -2.0)
    y = op.apply_psi(x_true) + 0.1 * rng_np.normal(size=8)

    psi = op.psi_matrix()
    prior_prec = np.full(16, tau)  # alpha = 1 everywhere
    cov = np.linalg.inv(alpha0 * (psi.T @ psi + np.diag(prior_prec)))
    mean = cov @ (alpha0 * psi.T @ y)

    rng = RngHandle(3)
    acc = np.zeros(16)
    sweeps = 30_000
    for _ in range(sweeps):
        sp.update_x(state, y, op, rng)
        acc += sp._flat_x(state)
    est = acc / sweeps
    scale = float(np.max(np.abs(mean)))
    assert np.max(np.abs(est - mean)) < 0.02 * scale


# ---------------------------------------------------------------------------
# update_alpha


def test_update_alpha_zero_coefficient_floor():
    layout = tiny_layout()
    state = make_fixed_state(layout)
    sp.update_alpha(state, RngHandle(4))
    for band in layout.bands:
        for level in range(layout.levels):
            a = state.shrinkage.alpha[band][level]
            assert np.all(np.isfinite(a)) and np.all(a > 0)
    # conditional mean grows as |x| -> 0
    b = 8.0
    means = [gig_mean(max(a, 1e-12), b, -0.5) for a in (1.0, 0.1, 0.0)]
    assert means[0] < means[1] < means[2]


def test_update_alpha_matches_quadrature():
    layout = tiny_layout()
    x_val, gt, tau, alpha0 = 0.7, 0.2, 1.5, 2.0
    state = make_fixed_state(layout, alpha0=alpha0, tau=tau)
    for band in layout.bands:
        state.pyramid.detail[band][0][...] = x_val
        state.shrinkage.gamma_tilde[band][0][...] = gt
    rng = RngHandle(5)
    draws = []
    for _ in range(20_000):
        sp.update_alpha(state, rng)
        draws.append(state.shrinkage.alpha["HH"][0][0, 0])
    a = tau * alpha0 * x_val ** 2
    b = 1.0 / gt
    grid, cdf = _oracles.gig_cdf_on_grid(a, b, -0.5)
    sup = _oracles.empirical_cdf_sup_distance(draws, grid, cdf)
    assert sup < 0.02
    # conditional mode agrees with the closed-form GIG mode (the grid's
    # log-density lives in log space, so strip the Jacobian first)
    x_dens, logd = _oracles.gig_log_density_grid(a, b, -0.5)
    assert x_dens[np.argmax(logd - np.log(x_dens))] == pytest.approx(
        gig_mode(a, b, -0.5), rel=0.01)


# ---------------------------------------------------------------------------
# update_tau_and_alpha0


def test_tau_prior_reduction_at_zero_coefficients():
    layout = tiny_layout()
    state = make_fixed_state(layout)
    hyper = state.hyper
    rng = RngHandle(6)
    op = ms.SensingOperator("identity", layout, "daub4")
    draws = np.empty(3000)
    for t in range(draws.size):
        sp.update_tau_and_alpha0(state, np.zeros(16), op, rng,
                                 residual=np.zeros(16), update_noise=False)
        draws[t] = state.shrinkage.tau[1]
    n_l = 3 * layout.level_size(2)  # all bands share the level scale
    expect = (hyper.a0 + 0.5 * n_l) / hyper.b0
    assert draws.mean() == pytest.approx(expect, rel=0.03)


def test_alpha0_conditional_given_zero_signal():
    # with x pinned at zero every quadratic prior term vanishes and the noise
    # precision draw reduces to Gamma(a0 + (m+n)/2, b0 + rss/2) exactly
    layout = tiny_layout()
    state = make_fixed_state(layout)
    y = np.linspace(0.1, 1.0, 16)
    rss = float(y @ y)
    op = ms.SensingOperator("identity", layout, "daub4")
    rng = RngHandle(6)
    draws = np.empty(3000)
    for t in range(draws.size):
        sp.update_tau_and_alpha0(state, y, op, rng, residual=y.copy())
        draws[t] = state.noise.alpha0
    hyper = state.hyper
    expect = (hyper.a0 + 16.0) / (hyper.b0 + 0.5 * rss)
    assert draws.mean() == pytest.approx(expect, rel=0.03)


def test_noise_std_tracks_pure_noise():
    # full chain on pure-noise data: some noise energy is inevitably absorbed
    # by half-shrunk coefficients, but the posterior noise level has to stay
    # in the neighbourhood of the truth
    sigma = 0.1
    rng = RngHandle(7)
    y = ms.add_gaussian_noise(np.zeros(1024), sigma, rng)
    op = ms.make_identity_operator((32, 32), levels=2)
    cfg = sp.ChainConfig(total_samples=600, burn_in=200, seed=7)
    res = sp.run_chain(y, op, cfg)
    assert res.noise_std == pytest.approx(sigma, rel=0.15)


# ---------------------------------------------------------------------------
# update_gamma_metropolis


def test_gamma_single_node_level_invariant():
    layout = tiny_layout()
    state = make_fixed_state(layout)
    sp.update_gamma_metropolis(state, RngHandle(8))
    for band in layout.bands:
        assert state.shrinkage.gamma_tilde[band][0][0, 0] == 1.0


def test_gamma_chain_matches_grid_oracle():
    # spot check against the frozen quadrature oracle; the acceptance suite
    # runs the long-chain version of this comparison
    oracle = np.load(os.path.join(DATA, "toy_gamma_oracle.npz"))
    alpha_leaf = oracle["alpha"]
    layout = tiny_layout()
    state = make_fixed_state(layout)
    for band in layout.bands:
        state.shrinkage.alpha[band][1][...] = alpha_leaf.reshape(2, 2)
    rng = RngHandle(9)
    draws = []
    thin, burn = 5, 2000
    t = 0
    while len(draws) < 15_000:
        sp.update_gamma_metropolis(state, rng)
        if t >= burn and (t - burn) % thin == 0:
            for band in layout.bands:
                draws.append(state.shrinkage.gamma_tilde[band][1].ravel().copy())
        t += 1
    draws = np.asarray(draws)
    worst = 0.0
    for i in range(4):
        grid, cdf = oracle[f"grid{i}"], oracle[f"cdf{i}"]
        emp = np.searchsorted(np.sort(draws[:, i]), grid) / draws.shape[0]
        worst = max(worst, float(np.max(np.abs(emp - cdf))))
    assert worst < 0.03


def test_gamma_acceptance_statistics_shape():
    layout = tiny_layout()
    state = make_fixed_state(layout)
    acc, prop = sp.update_gamma_metropolis(state, RngHandle(10))
    # three bands, one multi-node level of four nodes each
    assert prop == 12
    assert 0 <= acc <= prop


# ---------------------------------------------------------------------------
# update_spiky


def _identity_spiky_state(seed):
    op = ms.make_identity_operator((16, 16), levels=2)
    layout = op.layout
    state = make_fixed_state(layout, alpha0=2500.0)
    m = layout.n
    state.noise.spiky = True
    state.noise.w = np.zeros(m)
    state.noise.zeta = np.ones(m)
    state.noise.p_raw = np.full(m, 1.0 / m)
    state.noise.p = np.full(m, 1.0 / m)
    state.noise.nu = 1.0
    return op, state


def test_spiky_zero_residual_centers_w_at_zero():
    op, state = _identity_spiky_state(11)
    y = np.zeros(256)
    rng = RngHandle(11)
    acc = np.zeros(256)
    n_draws = 2000
    for _ in range(n_draws):
        state.noise.w[...] = 0.0
        sp.update_spiky(state, y, op, rng)
        acc += state.noise.w
    se = 1.0 / math.sqrt(2500.0 * 2.0) / math.sqrt(n_draws)
    assert np.max(np.abs(acc / n_draws)) < 6.0 * se


def test_spiky_large_nu_shrinks_w():
    op, state = _identity_spiky_state(12)
    y = 0.1 * np.ones(256)
    rng = RngHandle(12)
    spreads = {}
    for nu in (1.0, 1e6):
        vals = []
        for _ in range(500):
            state.noise.nu = nu
            state.noise.w[...] = 0.0
            state.noise.zeta[...] = 1.0
            sp.update_spiky(state, y, op, rng)
            vals.append(state.noise.w.copy())
        spreads[nu] = float(np.mean(np.square(vals)))
    assert spreads[1e6] < 1e-3 * spreads[1.0]


def test_spiky_recovers_single_spike():
    rng = RngHandle(13)
    img = np.full((16, 16), 0.5)
    clean = img.ravel()
    spike_amp = 0.8
    y = clean.copy()
    y[77] += spike_amp
    y = ms.add_gaussian_noise(y, 0.01, rng)
    op = ms.make_identity_operator((16, 16), levels=2)
    cfg = sp.ChainConfig(total_samples=800, burn_in=300, seed=13, spiky=True)
    res = sp.run_chain(y, op, cfg)
    assert res.w_mean is not None
    assert res.w_mean[77] >= 0.8 * spike_amp
    others = np.delete(res.w_mean, 77)
    assert np.max(np.abs(others)) < 0.05 * spike_amp


def test_spiky_requires_enabled_state():
    layout = tiny_layout()
    state = make_fixed_state(layout)
    op = ms.SensingOperator("identity", layout, "daub4")
    with pytest.raises(RuntimeError):
        sp.update_spiky(state, np.zeros(16), op, RngHandle(14))


# ---------------------------------------------------------------------------
# run_chain


def test_run_chain_rejects_bad_burnin():
    op = ms.make_identity_operator((16, 16), levels=2)
    with pytest.raises(ValueError):
        sp.run_chain(np.zeros(256), op,
                     sp.ChainConfig(total_samples=10, burn_in=10))


def test_run_chain_deterministic():
    op = ms.make_identity_operator((16, 16), levels=2)
    y = ms.add_gaussian_noise(np.zeros(256), 0.3, RngHandle(15))
    cfg = sp.ChainConfig(total_samples=60, burn_in=20, seed=4)
    r1 = sp.run_chain(y, op, cfg)
    r2 = sp.run_chain(y, op, cfg)
    assert np.array_equal(r1.x_mean, r2.x_mean)
    assert r1.alpha0_mean == r2.alpha0_mean
    assert r1.accept_rate == r2.accept_rate


def test_run_chain_small_cs_reconstruction():
    rng = RngHandle(16)
    img = ms.synthetic_sparse_image((32, 32), rng, levels=2)
    n = img.size
    m = n // 2
    op = ms.make_gaussian_operator(m, (32, 32), rng=RngHandle(17), levels=2)
    y = ms.add_gaussian_noise(op.apply_h(img.ravel()), 0.01, RngHandle(18))
    cfg = sp.ChainConfig(total_samples=700, burn_in=300, seed=5)
    res = sp.run_chain(y, op, cfg)
    x_true = op.analyze(img)
    rel = np.linalg.norm(res.x_mean - x_true) / np.linalg.norm(x_true)
    assert rel < 0.15


def test_run_chain_trace_and_checkpoint(tmp_path):
    op = ms.make_identity_operator((16, 16), levels=2)
    y = ms.add_gaussian_noise(np.full(256, 0.5), 0.05, RngHandle(19))
    trace = tmp_path / "trace.csv"
    chk = tmp_path / "state.txt"
    cfg = sp.ChainConfig(total_samples=40, burn_in=10, seed=6,
                         track_indices=(0, 7))
    res = sp.run_chain(y, op, cfg, trace_path=trace, checkpoint_path=chk)
    lines = trace.read_text().splitlines()
    assert lines[0] == "iter,log_joint,alpha0,accept_rate"
    assert len(lines) == 41
    vals = np.array([float(l.split(",")[1]) for l in lines[1:]])
    assert np.all(np.isfinite(vals))
    assert np.all(np.isfinite(res.log_joint_trace))
    state = md.load_state(chk)
    assert state.layout == op.layout
    assert set(res.histograms) == {0, 7}
    assert res.histograms[0].size == res.n_retained


def test_retained_states_keep_simplex_invariants():
    op = ms.make_identity_operator((16, 16), levels=2)
    y = ms.add_gaussian_noise(np.full(256, 0.5), 0.05, RngHandle(20))
    cfg = sp.ChainConfig(total_samples=30, burn_in=5, seed=8)
    rng = RngHandle(cfg.seed)
    state = sp.init_state(y, op, cfg, rng)
    resid = None
    for t in range(cfg.total_samples):
        resid = sp.update_x(state, y, op, rng, residual=resid)
        sp.update_alpha(state, rng)
        sp.update_gamma_metropolis(state, rng)
        sp.update_tau_and_alpha0(state, y, op, rng, residual=resid)
        for band in state.layout.bands:
            for level in range(state.layout.levels):
                gt = state.shrinkage.gamma_tilde[band][level]
                assert gt.sum() == pytest.approx(1.0, abs=1e-12)
                assert np.all(gt > 0)
                assert np.all(state.shrinkage.alpha[band][level] > 0)
        assert state.noise.alpha0 > 0
