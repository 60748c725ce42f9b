"""Deterministic-solver tests: update identities, convergence, spiky block."""

import math

import numpy as np
import pytest

from treeshrink import measurement as ms
from treeshrink import variational as vb
from treeshrink.randmath import (RngHandle, bessel_k_ratio, gig_mean,
                                 gig_mode)
from treeshrink import model as md


def small_setup(method="avb", spiky=False, structure="tree", **kw):
    op = ms.make_identity_operator((8, 8), levels=2)
    cfg = vb.SolverConfig(method=method, spiky=spiky, structure=structure,
                          **kw)
    y = np.zeros(64)
    vs = vb.init_variational(y, op, cfg)
    return op, cfg, vs


# ---------------------------------------------------------------------------
# moment identities


def test_gig_moments_match_closed_forms():
    a = np.array([0.5, 2.0, 7.0])
    b = np.array([3.0, 0.8, 1.2])
    mean, inv_mean = vb._gig_moments(a, b)
    for i in range(3):
        assert mean[i] == pytest.approx(gig_mean(a[i], b[i], -0.5), rel=1e-12)
        # 1/X of a GIG(a, b, p) is GIG(b, a, -p)
        assert inv_mean[i] == pytest.approx(gig_mean(b[i], a[i], 0.5),
                                            rel=1e-12)


def test_avb_update_is_pluginned_gig_mean():
    op, cfg, vs = small_setup()
    rng = np.random.default_rng(0)
    for band in vs.layout.bands:
        for lvl in range(vs.layout.levels):
            vs.alpha_inv_mean[band][lvl] = rng.uniform(
                0.5, 3.0, vs.layout.level_shape(lvl + 1))
    before = {band: [gt.copy() for gt in vs.gamma_tilde[band]]
              for band in vs.layout.bands}
    vb.avb_update_gamma(vs)
    for band in vs.layout.bands:
        gt0 = before[band][1]
        conc = vs.layout.expand_to_children(before[band][0]) / vs.hyper.n_c
        b = vs.alpha_inv_mean[band][1] * (1.0 - gt0)
        expect = gig_mean(2.0, b, conc - 1.0)
        assert np.allclose(vs.gamma_mean[band][1], expect, rtol=1e-12)
        assert np.allclose(vs.gamma_tilde[band][1],
                           expect / expect.sum(), rtol=1e-12)


def test_em_update_is_pluginned_gig_mode():
    op, cfg, vs = small_setup(method="em")
    rng = np.random.default_rng(1)
    for band in vs.layout.bands:
        for lvl in range(vs.layout.levels):
            vs.alpha_inv_mean[band][lvl] = rng.uniform(
                0.5, 3.0, vs.layout.level_shape(lvl + 1))
    before = {band: [gt.copy() for gt in vs.gamma_tilde[band]]
              for band in vs.layout.bands}
    vb.em_update_gamma(vs)
    for band in vs.layout.bands:
        gt0 = before[band][1]
        conc = vs.layout.expand_to_children(before[band][0]) / vs.hyper.n_c
        b = vs.alpha_inv_mean[band][1] * (1.0 - gt0)
        expect = np.maximum(gig_mode(2.0, b, conc - 1.0), md.GAMMA_FLOOR)
        assert np.allclose(vs.gamma_mean[band][1], expect, rtol=1e-12)


def test_em_weights_do_not_exceed_avb_weights():
    # the GIG mode sits below the GIG mean for every parameter triple used
    # by the weight updates (p - 1 < 1/2), so EM always prunes harder
    for b in (0.1, 1.0, 10.0):
        for conc in (0.03, 0.25, 0.9):
            assert gig_mode(2.0, b, conc - 1.0) < gig_mean(2.0, b, conc - 1.0)


def test_single_node_levels_stay_degenerate():
    # a single-node level has normalized weight identically one; the update
    # must pin it there no matter what junk the state holds
    from treeshrink import transform as tf
    layout = tf.TreeLayout("daub4", 4, 4, 2, (1, 1), [(1, 1), (2, 2)])
    hyper = md.Hyperparameters()
    mk = lambda fill: {b: [np.full(layout.level_shape(l), fill(l))
                           for l in range(1, layout.levels + 1)]
                       for b in layout.bands}
    vs = vb.VariationalState(
        layout=layout, hyper=hyper, structure="tree",
        mu=np.zeros(layout.n), sigma2=np.ones(layout.n),
        alpha_mean=mk(lambda l: 1.0), alpha_inv_mean=mk(lambda l: 1.0),
        gamma_mean=mk(lambda l: 1.0 / layout.level_size(l)),
        gamma_tilde=mk(lambda l: 1.0 / layout.level_size(l)),
        tau=np.ones(2), tau0=1.0, alpha0=1.0)
    for band in layout.bands:
        vs.gamma_tilde[band][0][...] = 0.7
    vb.avb_update_gamma(vs)
    for band in layout.bands:
        assert vs.gamma_tilde[band][0][0, 0] == 1.0
        assert vs.gamma_mean[band][0][0, 0] == 1.0
        assert vs.gamma_tilde[band][1].sum() == pytest.approx(1.0)


def test_vbs_leaf_estimate_matches_importance_integral():
    # at a leaf the only correction to the GIG proposal is the sum factor
    # s_minus + gamma, so the large-draw limit of the weighted mean is
    # (s_minus E[g] + E[g^2]) / (s_minus + E[g]) with GIG moments
    op, cfg, vs = small_setup(method="vbs")
    rng_np = np.random.default_rng(2)
    for band in vs.layout.bands:
        vs.alpha_inv_mean[band][1] = rng_np.uniform(
            0.5, 3.0, vs.layout.level_shape(2))
    gt0 = {band: vs.gamma_tilde[band][1].copy() for band in vs.layout.bands}
    ainv = {band: vs.alpha_inv_mean[band][1].copy()
            for band in vs.layout.bands}
    vb.vbs_update_gamma(vs, RngHandle(3), n_draws=60_000)
    band = "HH"
    g = gt0[band].ravel()
    s_tot = float(g.sum())
    conc = (vs.layout.expand_to_children(vs.gamma_tilde[band][0])
            / vs.hyper.n_c).ravel()
    got = vs.gamma_mean[band][1].ravel()
    for i in range(g.size):
        s_minus = s_tot - g[i]
        b = ainv[band].ravel()[i] * s_minus
        p = conc[i] - 1.0
        z = math.sqrt(2.0 * b)
        m1 = gig_mean(2.0, b, p)
        m2 = (b / 2.0) * bessel_k_ratio(p + 1, z) * bessel_k_ratio(p, z)
        expect = (s_minus * m1 + m2) / (s_minus + m1)
        assert got[i] == pytest.approx(expect, rel=0.02)


def test_vbs_reproducible_with_seed():
    op = ms.make_identity_operator((8, 8), levels=2)
    y = ms.add_gaussian_noise(np.linspace(0, 1, 64), 0.05, RngHandle(4))
    cfg = vb.SolverConfig(method="vbs", max_iters=8, vb_samples=50, seed=9)
    r1 = vb.run_solver(y, op, cfg)
    r2 = vb.run_solver(y, op, cfg)
    assert np.array_equal(r1.x_mean, r2.x_mean)
    assert r1.alpha0_mean == r2.alpha0_mean


# ---------------------------------------------------------------------------
# run_solver behaviour


def test_run_solver_validates_config():
    op = ms.make_identity_operator((8, 8), levels=2)
    y = np.zeros(64)
    with pytest.raises(ValueError):
        vb.run_solver(y, op, vb.SolverConfig(method="mcmc"))
    with pytest.raises(ValueError):
        vb.run_solver(y, op, vb.SolverConfig(max_iters=0))
    with pytest.raises(ValueError):
        vb.run_solver(y, op, vb.SolverConfig(method="vbs", vb_samples=0))
    with pytest.raises(ValueError):
        vb.run_solver(np.zeros(63), op, vb.SolverConfig())


def test_avb_converges_and_denoises():
    rng = RngHandle(5)
    img = ms.synthetic_sparse_image((32, 32), rng, levels=2)
    op = ms.make_identity_operator((32, 32), levels=2)
    sigma = 0.05
    y = ms.add_gaussian_noise(img.ravel(), sigma, RngHandle(6))
    cfg = vb.SolverConfig(method="avb", max_iters=200)
    res = vb.run_solver(y, op, cfg)
    assert res.n_retained < 200          # hit the tolerance cut
    noisy_psnr = ms.psnr(img, y.reshape(32, 32).clip(0, 1))
    assert ms.psnr(img, op.synthesize(res.x_mean)) > noisy_psnr + 3.0


def test_avb_is_deterministic():
    op = ms.make_identity_operator((8, 8), levels=2)
    y = ms.add_gaussian_noise(np.linspace(0, 1, 64), 0.05, RngHandle(7))
    cfg = vb.SolverConfig(method="avb", max_iters=30)
    r1 = vb.run_solver(y, op, cfg)
    r2 = vb.run_solver(y, op, cfg)
    assert np.array_equal(r1.x_mean, r2.x_mean)
    assert np.array_equal(r1.residual_trace, r2.residual_trace)


def test_solver_trace_file(tmp_path):
    op = ms.make_identity_operator((8, 8), levels=2)
    y = ms.add_gaussian_noise(np.linspace(0, 1, 64), 0.05, RngHandle(8))
    trace = tmp_path / "solve.csv"
    cfg = vb.SolverConfig(method="avb", max_iters=12, tol=0.0)
    res = vb.run_solver(y, op, cfg, trace_path=trace)
    lines = trace.read_text().splitlines()
    assert lines[0] == "iter,residual_norm,alpha0,max_dx"
    assert len(lines) == 13
    assert res.n_retained == 12
    for line in lines[1:]:
        assert all(np.isfinite(float(v)) for v in line.split(",")[1:])


def test_flat_structure_runs():
    op = ms.make_identity_operator((8, 8), levels=2)
    y = ms.add_gaussian_noise(np.linspace(0, 1, 64), 0.05, RngHandle(9))
    res = vb.run_solver(y, op, vb.SolverConfig(max_iters=20,
                                               structure="flat"))
    assert np.all(np.isfinite(res.x_mean))
    assert res.alpha0_mean > 0


def test_methods_agree_on_easy_denoising():
    # strong signal, light noise: all three weight rules find the support,
    # so the reconstructions nearly coincide
    rng = RngHandle(10)
    img = ms.synthetic_sparse_image((32, 32), rng, levels=2)
    op = ms.make_identity_operator((32, 32), levels=2)
    y = ms.add_gaussian_noise(img.ravel(), 0.01, RngHandle(11))
    outs = {}
    for method in ("avb", "vbs", "em"):
        res = vb.run_solver(y, op, vb.SolverConfig(method=method,
                                                   max_iters=60, seed=1))
        outs[method] = ms.psnr(img, op.synthesize(res.x_mean))
    assert max(outs.values()) - min(outs.values()) < 3.0
    assert min(outs.values()) > 30.0


# ---------------------------------------------------------------------------
# spiky block


def test_spiky_updates_require_flag():
    op, cfg, vs = small_setup()
    with pytest.raises(RuntimeError):
        vb.vb_update_spiky(vs, np.zeros(64), op)


def test_spiky_zero_residual_fixed_point():
    op, cfg, vs = small_setup(spiky=True)
    vs.residual = np.zeros(64)
    vs.alpha0 = 100.0
    denom = 1.0 + vs.nu * vs.zeta_mean   # values entering the w update
    vb.vb_update_spiky(vs, np.zeros(64), op)
    assert np.all(vs.w_mean == 0.0)
    assert np.allclose(vs.w_var, 1.0 / (100.0 * denom))
    assert np.all(vs.residual == 0.0)


def test_spiky_strong_nu_shrinks_w():
    op, cfg, vs = small_setup(spiky=True)
    y = np.full(64, 0.2)
    vs.residual = y.copy()          # Psi mu = 0, w_mean = 0
    vs.nu = 1e8
    vb.vb_update_spiky(vs, y, op)
    assert np.max(np.abs(vs.w_mean)) < 1e-6


def test_spiky_nu_update_closed_form():
    op, cfg, vs = small_setup(spiky=True)
    y = np.full(64, 0.3)
    vs.residual = y.copy()
    vs.alpha0 = 50.0
    vb.vb_update_spiky(vs, y, op)
    w2 = vs.w_mean ** 2 + vs.w_var
    expect = (vs.hyper.e0 + 32.0) / (
        vs.hyper.f0 + 0.5 * 50.0 * float((vs.zeta_mean * w2).sum()))
    assert vs.nu == pytest.approx(expect, rel=1e-12)


def test_spiky_solver_recovers_single_spike():
    img = np.full((16, 16), 0.5)
    y = img.ravel().copy()
    y[40] += 0.7
    y = ms.add_gaussian_noise(y, 0.01, RngHandle(12))
    op = ms.make_identity_operator((16, 16), levels=2)
    res = vb.run_solver(y, op, vb.SolverConfig(method="avb", spiky=True,
                                               max_iters=80))
    assert res.w_mean is not None
    assert res.w_mean[40] > 0.5
    assert np.max(np.abs(np.delete(res.w_mean, 40))) < 0.1
