"""Command-line front end: recovery/denoising runs and self checks.

Subcommands
-----------
cs            compressive-sensing recovery from random Gaussian projections
denoise       spiky + Gaussian noise removal with identity measurements
prior-sample  draw an image from the generative model and report stats
check         run numerical self checks (exit code 2 on failure)

Every run writes a ``manifest.json`` (settings + metrics + file names),
a ``metrics.csv`` and per-run trace CSVs into the output directory.  The
directory comes from ``--out-dir``, else the ``TREESHRINK_OUTDIR``
environment variable, else ``./treeshrink-out``.  Outputs are fully
determined by the arguments and ``--seed``.
"""

import argparse
import csv
import json
import math
import os
import sys

import numpy as np

from . import __version__
from . import measurement as ms
from . import model as md
from . import transform
from .randmath import RngHandle, bessel_k, gig_mean, sample_gamma, sample_gig
from .sampler import ChainConfig, merge_summaries, run_chain
from .variational import SolverConfig, run_solver

DEFAULT_OUT = "treeshrink-out"


class _Parser(argparse.ArgumentParser):
    """argparse variant that exits with code 1 on bad usage."""

    def error(self, message):
        self.exit(1, f"{self.prog}: error: {message}\n")


def _parse_methods(text):
    """Split a method string like 'mcmc,avb,vb:50,em' into run specs.

    Returns a list of (label, kind, vb_samples) with label safe for file
    names.
    """
    out = []
    for tok in text.split(","):
        tok = tok.strip()
        if not tok:
            continue
        if tok == "mcmc":
            out.append(("mcmc", "mcmc", None))
        elif tok == "avb":
            out.append(("avb", "avb", None))
        elif tok == "em":
            out.append(("em", "em", None))
        elif tok.startswith("vb:"):
            try:
                s = int(tok[3:])
            except ValueError:
                raise ValueError(f"bad sample count in method '{tok}'")
            if s <= 0:
                raise ValueError("vb sample count must be positive")
            out.append((f"vb{s}", "vbs", s))
        else:
            raise ValueError(f"unknown method '{tok}' "
                             "(expected mcmc, avb, vb:<s> or em)")
    if not out:
        raise ValueError("no method given")
    return out


def _parse_models(text):
    if text == "both":
        return ["tree", "flat"]
    if text in ("tree", "flat"):
        return [text]
    raise ValueError("model must be tree, flat or both")


def _load_image(spec):
    """Load a grayscale [0,1] image; 'synthetic:<N>' builds the phantom."""
    if spec.startswith("synthetic:"):
        return ms.synthetic_phantom(int(spec.split(":", 1)[1]))
    if spec == "synthetic":
        return ms.synthetic_phantom()
    return ms.read_image(spec)


def _resolve_out_dir(args):
    out = args.out_dir or os.environ.get("TREESHRINK_OUTDIR") or DEFAULT_OUT
    os.makedirs(out, exist_ok=True)
    return out


def _finite(v):
    if v is None:
        return None
    v = float(v)
    return v if math.isfinite(v) else str(v)


def _default_burnin(args, kind):
    if kind != "mcmc":
        return 0
    if args.burnin is not None:
        return args.burnin
    return max(1, args.iters // 5)


def _run_one(y, operator, kind, vb_samples, structure, spiky, args,
             stream, trace_path):
    """Dispatch a single inference run; returns a PosteriorSummary."""
    if kind == "mcmc":
        cfg = ChainConfig(total_samples=args.iters,
                          burn_in=_default_burnin(args, kind),
                          seed=args.seed, spiky=spiky, structure=structure)
        chains = getattr(args, "chains", 1)
        summaries = []
        for c in range(chains):
            rng = RngHandle(args.seed, stream=stream * 64 + c)
            tp = trace_path if c == 0 else None
            summaries.append(run_chain(y, operator, cfg, trace_path=tp,
                                       rng=rng))
        return merge_summaries(summaries) if len(summaries) > 1 \
            else summaries[0]
    cfg = SolverConfig(method=kind, max_iters=args.iters,
                       vb_samples=vb_samples or 100,
                       seed=args.seed * 1000 + stream,
                       spiky=spiky, structure=structure)
    return run_solver(y, operator, cfg, trace_path=trace_path)


def _write_metrics(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["command", "model", "method", "psnr",
                         "noise_std", "accept_rate", "n_retained"])
        for r in rows:
            writer.writerow([r["command"], r["model"], r["method"],
                             "" if r["psnr"] is None else f"{r['psnr']:.4f}",
                             f"{r['noise_std']:.6e}",
                             "" if r["accept_rate"] is None
                             else f"{r['accept_rate']:.4f}",
                             r["n_retained"]])


def _write_manifest(out_dir, payload):
    payload = dict(payload)
    payload["tool"] = f"treeshrink {__version__}"
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


# ---------------------------------------------------------------------------
# cs

def cmd_cs(args):
    out_dir = _resolve_out_dir(args)
    image = _load_image(args.image)
    methods = _parse_methods(args.method)
    models = _parse_models(args.model)
    n = image.size
    m = ms.measurement_count(args.csr, n)

    rng_data = RngHandle(args.seed, stream=1)
    operator = ms.make_gaussian_operator(m, image.shape, basis=args.basis,
                                         rng=rng_data, levels=args.levels)
    y = ms.add_gaussian_noise(operator.apply_h(image.ravel()),
                              args.noise_sigma, rng_data)

    ms.write_image(os.path.join(out_dir, "true.png"), image)
    rows = []
    runs = []
    stream = 10
    for structure in models:
        for label, kind, s in methods:
            tag = f"{structure}_{label}"
            trace = os.path.join(out_dir, f"trace_{tag}.csv")
            summary = _run_one(y, operator, kind, s, structure, False,
                               args, stream, trace)
            stream += 1
            recovered = operator.synthesize(summary.x_mean)
            rec_path = os.path.join(out_dir, f"recovered_{tag}.png")
            ms.write_image(rec_path, recovered)
            val = ms.psnr(image, np.clip(recovered, 0.0, 1.0))
            row = {"command": "cs", "model": structure, "method": label,
                   "psnr": val, "noise_std": summary.noise_std,
                   "accept_rate": summary.accept_rate,
                   "n_retained": summary.n_retained}
            rows.append(row)
            runs.append({"model": structure, "method": label,
                         "psnr": _finite(val),
                         "noise_std": _finite(summary.noise_std),
                         "accept_rate": _finite(summary.accept_rate),
                         "n_retained": summary.n_retained,
                         "files": {"recovered": os.path.basename(rec_path),
                                   "trace": os.path.basename(trace)}})
            print(f"[cs] {structure}/{label}: psnr={val:.2f} dB  "
                  f"noise_std={summary.noise_std:.4f}")

    _write_metrics(os.path.join(out_dir, "metrics.csv"), rows)
    _write_manifest(out_dir, {
        "command": "cs",
        "settings": {"image": args.image, "basis": args.basis,
                     "levels": args.levels, "csr": args.csr,
                     "noise_sigma": args.noise_sigma,
                     "method": args.method, "model": args.model,
                     "iters": args.iters, "burnin": args.burnin,
                     "chains": args.chains, "seed": args.seed,
                     "measurements": m, "coefficients": n},
        "runs": runs,
        "files": {"true_image": "true.png", "metrics": "metrics.csv"},
    })
    return 0


# ---------------------------------------------------------------------------
# denoise

def cmd_denoise(args):
    out_dir = _resolve_out_dir(args)
    clean = _load_image(args.image)
    methods = _parse_methods(args.method)
    models = _parse_models(args.model)

    rng_data = RngHandle(args.seed, stream=1)
    spiked, mask = ms.add_spiky_noise(clean, args.spike_rate,
                                      tuple(args.spike_range), rng_data)
    noisy = ms.add_gaussian_noise(spiked, args.noise_sigma, rng_data)
    operator = ms.make_identity_operator(clean.shape, basis=args.basis,
                                         levels=args.levels)
    y = noisy.ravel()

    ms.write_image(os.path.join(out_dir, "clean.png"), clean)
    ms.write_image(os.path.join(out_dir, "noisy.png"),
                   np.clip(noisy, 0.0, 1.0))
    # PSNR of the raw measurement; clipping is only for the PNG.
    psnr_noisy = ms.psnr(clean, noisy)

    rows = []
    runs = []
    stream = 10
    for structure in models:
        for label, kind, s in methods:
            tag = f"{structure}_{label}"
            trace = os.path.join(out_dir, f"trace_{tag}.csv")
            summary = _run_one(y, operator, kind, s, structure, True,
                               args, stream, trace)
            stream += 1
            recovered = operator.synthesize(summary.x_mean)
            rec_path = os.path.join(out_dir, f"recovered_{tag}.png")
            ms.write_image(rec_path, recovered)
            val = ms.psnr(clean, np.clip(recovered, 0.0, 1.0))
            files = {"recovered": os.path.basename(rec_path),
                     "trace": os.path.basename(trace)}
            if summary.w_mean is not None:
                wimg = summary.w_mean.reshape(clean.shape)
                lo, hi = float(wimg.min()), float(wimg.max())
                vis = (wimg - lo) / (hi - lo) if hi > lo \
                    else np.zeros_like(wimg)
                sp_path = os.path.join(out_dir, f"spikes_{tag}.png")
                ms.write_image(sp_path, vis)
                files["spikes"] = os.path.basename(sp_path)
            row = {"command": "denoise", "model": structure, "method": label,
                   "psnr": val, "noise_std": summary.noise_std,
                   "accept_rate": summary.accept_rate,
                   "n_retained": summary.n_retained}
            rows.append(row)
            runs.append({"model": structure, "method": label,
                         "psnr": _finite(val),
                         "psnr_gain": _finite(val - psnr_noisy),
                         "noise_std": _finite(summary.noise_std),
                         "accept_rate": _finite(summary.accept_rate),
                         "n_retained": summary.n_retained,
                         "files": files})
            print(f"[denoise] {structure}/{label}: psnr={val:.2f} dB "
                  f"(noisy {psnr_noisy:.2f} dB)  "
                  f"noise_std={summary.noise_std:.4f}")

    _write_metrics(os.path.join(out_dir, "metrics.csv"), rows)
    _write_manifest(out_dir, {
        "command": "denoise",
        "settings": {"image": args.image, "basis": args.basis,
                     "levels": args.levels,
                     "noise_sigma": args.noise_sigma,
                     "spike_rate": args.spike_rate,
                     "spike_range": list(args.spike_range),
                     "method": args.method, "model": args.model,
                     "iters": args.iters, "burnin": args.burnin,
                     "seed": args.seed},
        "noisy_psnr": _finite(psnr_noisy),
        "spike_count": int(mask.sum()),
        "runs": runs,
        "files": {"clean_image": "clean.png", "noisy_image": "noisy.png",
                  "metrics": "metrics.csv"},
    })
    return 0


# ---------------------------------------------------------------------------
# prior-sample

def cmd_prior_sample(args):
    out_dir = _resolve_out_dir(args)
    if args.basis == "bdct8":
        layout = transform.build_bdct_tree_layout(args.size, args.size)
    else:
        levels = args.levels if args.levels is not None \
            else transform.default_levels(args.size, args.size)
        layout = transform.build_wavelet_tree_layout(
            args.size, args.size, levels)
    hyper = md.Hyperparameters()
    rng = RngHandle(args.seed, stream=2)
    shr = md.prior_draw_tree(layout, hyper, rng)
    pyramid = md.prior_draw_coefficients(shr, layout, hyper, rng)
    if args.basis == "bdct8":
        image = transform.bdct_inverse(pyramid)
    else:
        image = transform.dwt2_inverse(pyramid)
    lo, hi = float(image.min()), float(image.max())
    vis = (image - lo) / (hi - lo) if hi > lo else np.zeros_like(image)
    ms.write_image(os.path.join(out_dir, "draw.png"), vis)

    levels = []
    for level in range(1, layout.levels + 1):
        xs = np.concatenate([pyramid.detail[b][level - 1].ravel()
                             for b in layout.bands])
        gts = np.concatenate([shr.gamma_tilde[b][level - 1].ravel()
                              for b in layout.bands])
        big = float(np.mean(np.abs(xs) > 0.05 * np.abs(xs).max())) \
            if xs.size and np.abs(xs).max() > 0 else 0.0
        levels.append({"level": level, "nodes": int(xs.size),
                       "active_fraction": round(big, 6),
                       "weight_max": _finite(gts.max()),
                       "weight_min": _finite(gts.min())})
        print(f"[prior-sample] level {level}: {xs.size} nodes, "
              f"active fraction {big:.4f}")
    _write_manifest(out_dir, {
        "command": "prior-sample",
        "settings": {"size": args.size, "basis": args.basis,
                     "levels": args.levels, "seed": args.seed},
        "level_stats": levels,
        "files": {"draw": "draw.png"},
    })
    return 0


# ---------------------------------------------------------------------------
# check

def _analysis_matrix(size, basis):
    """Dense transform matrix built column-by-column from unit pixels."""
    n = size * size
    mat = np.empty((n, n))
    for j in range(n):
        img = np.zeros(n)
        img[j] = 1.0
        img = img.reshape(size, size)
        if basis == "bdct8":
            pyr = transform.bdct_forward(img)
        else:
            pyr = transform.dwt2_forward(
                img, transform.default_levels(size, size))
        mat[:, j] = transform.flatten(pyr)
    return mat


def cmd_check(args):
    results = []

    def record(name, ok, detail=""):
        results.append((name, bool(ok)))
        tail = f" ({detail})" if detail and not ok else ""
        print(f"check {name}: {'ok' if ok else 'FAIL'}{tail}")

    gen = RngHandle(20240229, stream=3).gen
    img = gen.standard_normal((32, 32))
    back = transform.dwt2_inverse(transform.dwt2_forward(img, levels=2))
    err = float(np.max(np.abs(back - img)))
    record("daub4-roundtrip", err < 1e-10, f"err={err:.2e}")

    back = transform.bdct_inverse(transform.bdct_forward(img))
    err = float(np.max(np.abs(back - img)))
    record("bdct8-roundtrip", err < 1e-10, f"err={err:.2e}")

    for basis in ("daub4", "bdct8"):
        mat = _analysis_matrix(16, basis)
        err = float(np.max(np.abs(mat.T @ mat - np.eye(mat.shape[1]))))
        record(f"{basis}-orthonormal", err < 1e-10, f"err={err:.2e}")

    op = ms.make_gaussian_operator(64, (16, 16),
                                   rng=RngHandle(20240229, stream=4))
    x = gen.standard_normal(op.n)
    u = gen.standard_normal(op.m)
    lhs = float(op.apply_psi(x) @ u)
    rhs = float(x @ op.apply_psi_adjoint(u))
    err = abs(lhs - rhs) / max(abs(lhs), 1e-12)
    record("operator-adjoint", err < 1e-8, f"relerr={err:.2e}")

    want = math.sqrt(math.pi / 2.0) * math.exp(-1.0)
    err = abs(bessel_k(0.5, 1.0) - want)
    record("bessel-closed-form", err < 1e-12, f"err={err:.2e}")

    err = abs(gig_mean(2.0, 2.0, 0.5) - 1.5)
    record("gig-closed-form", err < 1e-12, f"err={err:.2e}")

    draws = sample_gig(2.0, 2.0, 0.5, RngHandle(20240229, stream=5),
                       size=20000)
    err = abs(float(draws.mean()) - 1.5) / 1.5
    record("gig-sampler-mean", err < 0.05, f"relerr={err:.2e}")

    draws = sample_gamma(0.01, 1.0, RngHandle(20240229, stream=6),
                         size=200000)
    err = abs(float(draws.mean()) - 0.01) / 0.01
    record("gamma-tiny-shape", err < 0.25, f"relerr={err:.2e}")

    layout = transform.build_wavelet_tree_layout(32, 32, 3)
    shr = md.prior_draw_tree(layout, md.Hyperparameters(),
                             RngHandle(20240229, stream=7))
    worst = max(abs(float(shr.gamma_tilde[b][l].sum()) - 1.0)
                for b in layout.bands for l in range(layout.levels))
    record("prior-normalization", worst < 1e-9, f"err={worst:.2e}")

    pyr = transform.dwt2_forward(img, levels=2)
    same = np.array_equal(
        transform.flatten(transform.unflatten(transform.flatten(pyr),
                                              pyr.layout)),
        transform.flatten(pyr))
    record("flatten-roundtrip", same)

    bad = sum(1 for _, ok in results if not ok)
    if bad:
        print(f"self-check FAILED ({bad} of {len(results)} checks)")
        return 2
    print(f"self-check passed ({len(results)} checks)")
    return 0


# ---------------------------------------------------------------------------
# parser

def _add_common(p, image=True):
    if image:
        p.add_argument("--image", default="synthetic:128",
                       help="input image path, or synthetic:<N> for the "
                            "built-in phantom (default synthetic:128)")
    p.add_argument("--basis", choices=("daub4", "bdct8"), default="daub4",
                   help="transform family (default daub4)")
    p.add_argument("--levels", type=int, default=None,
                   help="tree depth; default picks from the image size")
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--out-dir", default=None,
                   help="output directory (default $TREESHRINK_OUTDIR "
                        f"or ./{DEFAULT_OUT})")


def _add_inference(p, iters):
    p.add_argument("--method", default="avb",
                   help="comma list of mcmc, avb, vb:<s>, em (default avb)")
    p.add_argument("--model", choices=("tree", "flat", "both"),
                   default="tree", help="shrinkage structure (default tree)")
    p.add_argument("--iters", type=int, default=iters,
                   help=f"MCMC sweeps or solver iterations "
                        f"(default {iters})")
    p.add_argument("--burnin", type=int, default=None,
                   help="MCMC burn-in (default iters/5)")


def build_parser():
    parser = _Parser(prog="treeshrink",
                     description="Tree-structured Bayesian shrinkage for "
                                 "compressive sensing and denoising.")
    parser.add_argument("--version", action="version",
                        version=f"treeshrink {__version__}")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    p = sub.add_parser("cs", help="compressive-sensing recovery")
    _add_common(p)
    _add_inference(p, iters=1000)
    p.add_argument("--csr", type=float, default=0.4,
                   help="measurement ratio m/n in (0,1] (default 0.4)")
    p.add_argument("--noise-sigma", type=float, default=0.0,
                   help="measurement noise sigma (default 0)")
    p.add_argument("--chains", type=int, default=1,
                   help="independent MCMC chains to merge (default 1)")
    p.set_defaults(func=cmd_cs)

    p = sub.add_parser("denoise", help="spiky + Gaussian denoising")
    _add_common(p)
    _add_inference(p, iters=100)
    p.add_argument("--noise-sigma", type=float, default=0.02,
                   help="Gaussian noise sigma (default 0.02)")
    p.add_argument("--spike-rate", type=float, default=0.032,
                   help="spike probability per pixel (default 0.032)")
    p.add_argument("--spike-range", type=float, nargs=2,
                   default=(0.0, 1.0), metavar=("LO", "HI"),
                   help="uniform spike amplitude range (default 0 1)")
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("prior-sample", help="draw from the prior")
    _add_common(p, image=False)
    p.add_argument("--size", type=int, default=64,
                   help="image side length (default 64)")
    p.set_defaults(func=cmd_prior_sample)

    p = sub.add_parser("check", help="numerical self checks")
    p.set_defaults(func=cmd_check)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else 0
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
