"""Evaluation: correlation metrics, affine-calibrated MSE, occlusion
perturbation, and scatter plot output.

The protocol matches the training-free evaluation convention: per repeat,
draw disjoint calibration and test splits, fit a per-joint affine map from
recovered latent to ground-truth angle on the calibration split, then report
the absolute Pearson correlation and the calibrated squared error on the
test split.  Statistics are aggregated over repeats.
"""

from __future__ import annotations

import os
from itertools import permutations

import numpy as np

from . import scene as sc


class ZeroVarianceError(ValueError):
    pass


class InsufficientSamplesError(ValueError):
    pass


def pearson_abs(u, v):
    """Absolute Pearson correlation of two equal-length vectors."""
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if u.shape != v.shape or u.size < 2:
        raise ValueError("need two equal-length vectors with >= 2 entries")
    du = u - u.mean()
    dv = v - v.mean()
    su = np.sqrt(du @ du)
    sv = np.sqrt(dv @ dv)
    if su == 0 or sv == 0:
        raise ZeroVarianceError("constant input has no correlation")
    return abs(float(du @ dv / (su * sv)))


def mcc_report(latents, truth, mode="per-joint"):
    """Per-joint absolute correlations between recovered and true latents.

    ``per-joint`` pairs coordinate i with joint i.  ``assignment`` searches
    all coordinate permutations for the one maximizing the total correlation
    and reports per-joint values under it; returns (mcc, permutation) in that
    mode.
    """
    latents = np.asarray(latents, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if latents.shape != truth.shape or latents.ndim != 2:
        raise ValueError(
            f"shape mismatch: latents {latents.shape} vs truth {truth.shape}"
        )
    d = latents.shape[1]
    if mode == "per-joint":
        return np.array([pearson_abs(latents[:, i], truth[:, i])
                         for i in range(d)])
    if mode != "assignment":
        raise ValueError(f"unknown mode {mode!r}")
    corr = np.array([[pearson_abs(latents[:, i], truth[:, j])
                      for j in range(d)] for i in range(d)])
    best, best_perm = -1.0, None
    for perm in permutations(range(d)):
        total = sum(corr[perm[j], j] for j in range(d))
        if total > best:
            best, best_perm = total, perm
    mcc = np.array([corr[best_perm[j], j] for j in range(d)])
    return mcc, best_perm


def affine_fit(u, v):
    """Least-squares slope/intercept mapping u to v."""
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    du = u - u.mean()
    denom = du @ du
    if denom == 0:
        raise ZeroVarianceError("cannot calibrate against a constant latent")
    slope = float(du @ (v - v.mean()) / denom)
    intercept = float(v.mean() - slope * u.mean())
    return slope, intercept


def evaluate_protocol(latents, truth, rng, calibration_samples=1000,
                      test_samples=500, repeats=15, mode="per-joint"):
    """Repeat-split evaluation returning per-joint MCC and MSE statistics.

    Each repeat draws disjoint calibration/test index sets without
    replacement, fits the affine calibration on the calibration split, and
    scores on the test split.
    """
    latents = np.asarray(latents, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if latents.shape != truth.shape or latents.ndim != 2:
        raise ValueError("latents and truth must be equal-shape 2-D arrays")
    n, d = latents.shape
    need = calibration_samples + test_samples
    if n < need:
        raise InsufficientSamplesError(
            f"pool holds {n} samples, protocol needs {need}"
        )
    if mode == "assignment":
        _, perm = mcc_report(latents, truth, mode="assignment")
        latents = latents[:, list(perm)]
    mcc_runs = np.zeros((repeats, d))
    mse_runs = np.zeros((repeats, d))
    calibrations = []
    for r in range(repeats):
        idx = rng.permutation(n)
        cal = idx[:calibration_samples]
        test = idx[calibration_samples:need]
        cal_model = [affine_fit(latents[cal, j], truth[cal, j])
                     for j in range(d)]
        calibrations.append(cal_model)
        for j in range(d):
            mcc_runs[r, j] = pearson_abs(latents[test, j], truth[test, j])
            slope, intercept = cal_model[j]
            pred = slope * latents[test, j] + intercept
            mse_runs[r, j] = float(np.mean((pred - truth[test, j]) ** 2))
    return {
        "mcc_mean": mcc_runs.mean(axis=0),
        "mcc_std": mcc_runs.std(axis=0),
        "mse_mean": mse_runs.mean(axis=0),
        "mse_std": mse_runs.std(axis=0),
        "repeats": repeats,
        "calibration_samples": calibration_samples,
        "test_samples": test_samples,
        "calibration": calibrations[-1],
        "mode": mode,
    }


def apply_occlusions(images, size, rng, value=1.0):
    """White square patches at uniform positions, one per image per view.

    ``images`` is (N, V, H, W); size 0 returns an untouched copy.
    """
    images = np.asarray(images, dtype=np.float64)
    n, nviews, h, w = images.shape
    if size > min(h, w):
        raise ValueError(f"patch size {size} exceeds image size {h}x{w}")
    out = images.copy()
    if size == 0:
        return out
    for i in range(n):
        for v in range(nviews):
            row = int(rng.integers(0, h - size + 1))
            col = int(rng.integers(0, w - size + 1))
            out[i, v] = sc.occlude(out[i, v], (row, col, size), value)
    return out


def report_to_json(results, num_joints, regime, occlusion=None, seed=None):
    """Assemble the documented report schema from protocol results."""

    def joint_block(res):
        return {
            str(j): {
                "mcc_mean": float(res["mcc_mean"][j]),
                "mcc_std": float(res["mcc_std"][j]),
                "mse_mean": float(res["mse_mean"][j]),
                "mse_std": float(res["mse_std"][j]),
            }
            for j in range(num_joints)
        }

    report = {
        "schema_version": 1,
        "regime": regime,
        "seed": seed,
        "mode": results["mode"],
        "repeats": results["repeats"],
        "calibration_samples": results["calibration_samples"],
        "test_samples": results["test_samples"],
        "joints": joint_block(results),
    }
    if occlusion:
        report["occlusion"] = {
            str(size): joint_block(res) for size, res in occlusion.items()
        }
    return report


# ---------------------------------------------------------------------------
# scatter plots: deterministic, self-contained SVG 1.1


def _svg_coords(values, lo, hi, pix_lo, pix_hi):
    span = hi - lo if hi > lo else 1.0
    return pix_lo + (values - lo) / span * (pix_hi - pix_lo)


def emit_scatter(latents_j, truth_j, calibration, path, joint=None,
                 mcc=None, mse=None):
    """One scatter plot: truth on x, calibrated estimate on y, identity line.

    Byte output is a pure function of the inputs.
    """
    latents_j = np.asarray(latents_j, dtype=np.float64).reshape(-1)
    truth_j = np.asarray(truth_j, dtype=np.float64).reshape(-1)
    if latents_j.size == 0 or latents_j.shape != truth_j.shape:
        raise ValueError("need equal-length non-empty vectors")
    slope, intercept = calibration
    est = slope * latents_j + intercept

    width, height, margin = 420, 420, 50
    lo = float(min(truth_j.min(), est.min()))
    hi = float(max(truth_j.max(), est.max()))
    pad = 0.05 * (hi - lo if hi > lo else 1.0)
    lo, hi = lo - pad, hi + pad
    xs = _svg_coords(truth_j, lo, hi, margin, width - margin)
    ys = _svg_coords(est, lo, hi, height - margin, margin)

    lines = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" '
        f'width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<rect x="{margin}" y="{margin}" width="{width - 2 * margin}" '
        f'height="{height - 2 * margin}" fill="none" stroke="black" '
        'stroke-width="1"/>',
    ]
    x0 = _svg_coords(np.array([lo, hi]), lo, hi, margin, width - margin)
    y0 = _svg_coords(np.array([lo, hi]), lo, hi, height - margin, margin)
    lines.append(
        f'<line x1="{x0[0]:.2f}" y1="{y0[0]:.2f}" x2="{x0[1]:.2f}" '
        f'y2="{y0[1]:.2f}" stroke="gray" stroke-width="1" '
        'stroke-dasharray="4 3"/>'
    )
    for x, y in zip(xs, ys):
        lines.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="2.2" '
                     'fill="steelblue" fill-opacity="0.6"/>')
    title = "ground truth (rad)"
    lines.append(
        f'<text x="{width / 2:.0f}" y="{height - 12}" font-family="sans-serif" '
        f'font-size="13" text-anchor="middle">{title}</text>'
    )
    lines.append(
        f'<text x="14" y="{height / 2:.0f}" font-family="sans-serif" '
        f'font-size="13" text-anchor="middle" '
        f'transform="rotate(-90 14 {height / 2:.0f})">calibrated estimate '
        '(rad)</text>'
    )
    label = []
    if joint is not None:
        label.append(f"joint {joint}")
    if mcc is not None:
        label.append(f"MCC {mcc:.3f}")
    if mse is not None:
        label.append(f"MSE {mse:.3f}")
    if label:
        lines.append(
            f'<text x="{margin + 6}" y="{margin - 8}" '
            f'font-family="sans-serif" font-size="13">{", ".join(label)}</text>'
        )
    lines.append("</svg>")
    data = "\n".join(lines) + "\n"
    tmp = str(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        f.write(data)
    os.replace(tmp, path)
    return path
