"""Correspondence heatmaps, n-modal Gaussian fits and entropy uncertainty."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from .losses import softmax_heatmap  # noqa: F401 - re-exported inference path
from .synthgen import write_png

SPREAD_FLOOR = 0.25
SPREAD_CAP = 4.0   # in units of sigma


class DegenerateModes(ValueError):
    """The grid does not have enough distinct peaks for the requested mode count."""

    def __init__(self, requested: int, found: int):
        super().__init__(f"requested {requested} modes but found only {found} distinct peaks")
        self.requested = requested
        self.found = found


@dataclass
class Mode:
    u: float
    v: float
    weight: float
    spread: float

    @property
    def pixel(self) -> np.ndarray:
        return np.array([self.u, self.v])


@dataclass
class ModeSet:
    modes: List[Mode]
    entropy: float
    log_likelihood: List[float] = field(default_factory=list)  # EM trace, one value per iteration

    @property
    def means(self) -> np.ndarray:
        return np.array([[m.u, m.v] for m in self.modes]).reshape(-1, 2)

    def to_dict(self) -> dict:
        return {"modes": [{"u": m.u, "v": m.v, "weight": m.weight, "spread": m.spread} for m in self.modes],
                "entropy": self.entropy}

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")


def contrastive_heatmap(desc_a: np.ndarray, src_pixel, desc_b: np.ndarray) -> np.ndarray:
    """Negated descriptor distance, shifted to a zero minimum and normalized to sum 1."""
    u, v = src_pixel
    if not (0 <= u < desc_a.shape[0] and 0 <= v < desc_a.shape[1]):
        raise IndexError(f"source pixel ({u}, {v}) outside {desc_a.shape[0]}x{desc_a.shape[1]}")
    sim = -np.sqrt(np.sum((desc_b - desc_a[u, v]) ** 2, axis=-1))
    sim = sim - sim.min()
    total = sim.sum()
    if total <= 0:
        return np.full(sim.shape, 1.0 / sim.size)
    return sim / total


def entropy(grid: np.ndarray) -> float:
    p = np.asarray(grid, dtype=float).ravel()
    p = p[p > 0]
    return float(max(0.0, -np.sum(p * np.log(p))))


def peak_candidates(grid: np.ndarray, floor: Optional[float] = None) -> np.ndarray:
    """Flat indices of 3x3 local maxima above ``floor`` and above the grid minimum."""
    h, w = grid.shape
    if floor is None:
        floor = 1.0 / (10.0 * h * w)
    padded = np.pad(grid, 1, mode="constant", constant_values=-np.inf)
    win = np.lib.stride_tricks.sliding_window_view(padded, (3, 3))
    is_max = grid >= win.max(axis=(2, 3))
    ok = is_max & (grid > floor) & (grid > grid.min())
    if grid.min() == grid.max():
        ok[:] = False
    return np.flatnonzero(ok)


def nms_peaks(grid: np.ndarray, n: int, radius: float, floor: Optional[float] = None,
              pad: bool = False) -> np.ndarray:
    """Greedy peak picking: take the highest candidate, suppress a disk, repeat.

    With ``pad=True`` missing peaks are filled with the highest unsuppressed
    cells (any cell, not only local maxima) instead of raising.
    """
    h, w = grid.shape
    rr, cc = np.divmod(np.arange(h * w), w)
    flat = grid.ravel()
    cand = peak_candidates(grid, floor)
    cand = cand[np.argsort(-flat[cand], kind="stable")]
    chosen: List[int] = []
    for idx in cand:
        if all((rr[idx] - rr[j]) ** 2 + (cc[idx] - cc[j]) ** 2 > radius * radius for j in chosen):
            chosen.append(int(idx))
            if len(chosen) == n:
                break
    if len(chosen) < n:
        if not pad:
            raise DegenerateModes(n, len(chosen))
        order = np.argsort(-flat, kind="stable")
        lim = radius * radius
        while len(chosen) < n:
            for idx in order:
                if idx in chosen:
                    continue
                if all((rr[idx] - rr[j]) ** 2 + (cc[idx] - cc[j]) ** 2 > lim for j in chosen):
                    chosen.append(int(idx))
                    if len(chosen) == n:
                        break
            lim = lim / 4.0 if lim > 0.25 else -1.0  # shrink until any unused cell qualifies
    return np.array([[rr[i], cc[i]] for i in chosen], dtype=float)


def _axis_moments(length: int, mu: np.ndarray, var: np.ndarray):
    """log Z, mean and second central moment of exp(-(i - mu)^2 / 2 var) over i = 0..length-1."""
    i = np.arange(length, dtype=float)[None, :]
    e = -0.5 * (i - mu[:, None]) ** 2 / var[:, None]
    mx = e.max(axis=1, keepdims=True)
    wgt = np.exp(e - mx)
    z = wgt.sum(axis=1)
    mean = (wgt * i).sum(axis=1) / z
    second = (wgt * (i - mu[:, None]) ** 2).sum(axis=1) / z
    return np.log(z) + mx[:, 0], mean, second


def _grid_log_norm(shape, mu, var):
    """Per-component log normalizer of an isotropic Gaussian restricted to the pixel grid."""
    lr, _, _ = _axis_moments(shape[0], mu[:, 0], var)
    lc, _, _ = _axis_moments(shape[1], mu[:, 1], var)
    return lr + lc


def _log_components(xr, xc, shape, pi, mu, var):
    """(n, P) log of pi_k times the grid-normalized Gaussian k at each weighted cell."""
    d2 = (xr[None, :] - mu[:, :1]) ** 2 + (xc[None, :] - mu[:, 1:]) ** 2
    return (np.log(pi) - _grid_log_norm(shape, mu, var))[:, None] - 0.5 * d2 / var[:, None]


def _logsumexp0(a):
    mx = a.max(axis=0)
    return mx + np.log(np.exp(a - mx).sum(axis=0))


def _truncated_fit(shape, xbar, scatter, mu, var, floor_var, cap_var=np.inf, steps=5, tol=1e-6):
    """Moment matching for grid-truncated Gaussians.

    ``xbar`` (m, 2) and ``scatter`` (m,) are the responsibility-weighted mean
    and mean squared distance to it. Steps toward the point where the truncated model's mean
    equals ``xbar`` and its spread equals the data's; the outer EM loop warm-starts
    it, so a few steps per M-step suffice. Interior components settle in one or two.
    Means are kept on the grid and variances in ``[floor_var, cap_var]``.
    """
    hi = np.array([shape[0] - 1, shape[1] - 1], dtype=float)
    for _ in range(steps):
        _, er, sr = _axis_moments(shape[0], mu[:, 0], var)
        _, ec, sc = _axis_moments(shape[1], mu[:, 1], var)
        step = xbar - np.stack([er, ec], axis=1)
        mu = np.clip(mu + step, 0.0, hi)
        data = scatter + np.sum((xbar - mu) ** 2, axis=1)
        new_var = np.clip(var * data / np.maximum(sr + sc, 1e-300), floor_var, cap_var)
        done = np.abs(step).max() < tol and np.all(np.abs(new_var - var) <= tol * var)
        var = new_var
        if done:
            break
    return mu, var


def _em(xr, xc, wts, shape, mu, var, pi, floor_var, cap_var, max_iter, tol, bg=0.0):
    """EM from the given start; returns (mu, var, pi, bg, resp, trace) with a non-decreasing trace.

    ``bg`` is the weight of a uniform background component (0 disables it); ``pi``
    always sums to ``1 - bg``.
    """
    use_bg = bg > 0
    log_cell = -math.log(shape[0] * shape[1])

    def logs(pi, mu, var, bg):
        comp = _log_components(xr, xc, shape, pi, mu, var)
        if use_bg:
            comp = np.vstack([comp, np.full((1, comp.shape[1]), math.log(bg) + log_cell)])
        return comp, _logsumexp0(comp)

    log_comp, lse = logs(pi, mu, var, bg)
    ll = float(wts @ lse)
    trace = [ll]
    n = len(pi)
    for _ in range(max_iter):
        resp = np.exp(log_comp - lse) * wts                      # (n [+1], P)
        nk = resp[:n].sum(axis=1)
        live = nk > 1e-300
        mu_new, var_new = mu.copy(), var.copy()
        if np.any(live):
            r_live, n_live = resp[:n][live], nk[live]
            xbar = np.stack([r_live @ xr, r_live @ xc], axis=1) / n_live[:, None]
            scatter = (r_live @ (xr * xr) + r_live @ (xc * xc)) / n_live - np.sum(xbar ** 2, axis=1)
            mu_new[live], var_new[live] = _truncated_fit(shape, xbar, np.maximum(scatter, 0.0), mu[live],
                                                         var[live], floor_var, cap_var)
        mass = np.maximum(resp.sum(axis=1), 1e-300)
        mass = mass / mass.sum()
        pi_new, bg_new = mass[:n], (float(mass[n]) if use_bg else 0.0)
        log_comp_new, lse_new = logs(pi_new, mu_new, var_new, bg_new)
        ll_new = float(wts @ lse_new)
        if ll_new < ll - 1e-12 * max(1.0, abs(ll)):
            break  # keep the previous estimate so the trace stays monotone
        mu, var, pi, bg = mu_new, var_new, pi_new, bg_new
        log_comp, lse = log_comp_new, lse_new
        trace.append(ll_new)
        if ll_new - ll < tol:
            break
        ll = ll_new
    return mu, var, pi, bg, np.exp(log_comp - lse)[:n] * wts, trace


def _split_heaviest(xr, xc, resp, mu, var, pi, k):
    """Re-seed component ``k`` by splitting the heaviest one along its principal axis."""
    j = int(np.argmax(pi))
    r = resp[j] / resp[j].sum()
    d = np.stack([xr - mu[j, 0], xc - mu[j, 1]])
    evals, evecs = np.linalg.eigh((d * r) @ d.T)
    offset = evecs[:, -1] * np.sqrt(max(evals[-1], 1e-12))
    mu, var, pi = mu.copy(), var.copy(), pi.copy()
    mu[k], mu[j] = mu[j] + offset, mu[j] - offset
    var[k] = var[j]
    pi[k] = pi[j] = 0.5 * (pi[j] + pi[k])
    return mu, var, pi


def extract_modes(grid: np.ndarray, n: int, sigma: float = 1.0, radius: Optional[float] = None,
                  max_iter: int = 100, tol: float = 1e-8, spread_floor: float = SPREAD_FLOOR,
                  spread_cap: Optional[float] = SPREAD_CAP, min_weight: float = 0.05,
                  background: float = 0.01, strict: bool = True) -> ModeSet:
    """Fit an n-component isotropic GMM to a heatmap by pixel-weighted EM.

    Components are Gaussians restricted to (and renormalized over) the pixel
    grid, so modes near the border are not pulled inward. Initialized at NMS
    peaks (radius ``max(3, ceil(3 sigma))`` by default); modes come back
    ordered by descending weight. ``strict=False`` pads the initialization
    instead of raising :class:`DegenerateModes`.

    Three guards keep components on peaks. Spreads are capped at
    ``spread_cap * sigma`` (``None`` disables the cap), since otherwise a starved
    component widens into a model of the diffuse background. After convergence,
    a component with weight below ``min_weight / n`` is re-seeded by splitting
    the heaviest one, and the split fit is kept if its log-likelihood is higher.
    This handles matches closer than the NMS radius, which merge into one blob.
    A uniform component with starting weight ``background`` (0 disables it)
    absorbs the diffuse tail of trained heatmaps. On clean mixtures its weight
    decays to nothing within a few iterations. Reported weights cover the
    Gaussians only. The trace belongs to the last accepted run and is
    non-decreasing.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    grid = np.asarray(grid, dtype=float)
    h, w = grid.shape
    if radius is None:
        radius = max(3.0, math.ceil(3.0 * sigma))
    mu = nms_peaks(grid, n, radius, pad=not strict)

    rr, cc = np.divmod(np.arange(h * w), w)
    wts = grid.ravel() / grid.sum()
    keep = wts > 0
    xr, xc, wts = rr[keep].astype(float), cc[keep].astype(float), wts[keep]

    floor_var = spread_floor ** 2
    cap_var = np.inf if spread_cap is None else max((spread_cap * sigma) ** 2, floor_var)
    fit = (xr, xc, wts, (h, w))
    limits = (floor_var, cap_var, max_iter, tol)
    mu, var, pi, bg, resp, trace = _em(*fit, mu, np.full(n, max(sigma ** 2, floor_var)),
                                       np.full(n, (1.0 - background) / n), *limits, bg=background)
    for _ in range(n - 1):
        starved = np.flatnonzero(pi < min_weight * (1.0 - bg) / n)
        if n < 2 or starved.size == 0:
            break
        cand = _em(*fit, *_split_heaviest(xr, xc, resp, mu, var, pi, int(starved[0])), *limits, bg=bg)
        if cand[5][-1] <= trace[-1]:
            break
        mu, var, pi, bg, resp, trace = cand

    pi = pi / pi.sum()
    order = np.argsort(-pi, kind="stable")
    modes = [Mode(float(mu[k, 0]), float(mu[k, 1]), float(pi[k]), float(np.sqrt(var[k]))) for k in order]
    return ModeSet(modes, entropy(grid), trace)


# ------------------------------------------------------------------ export


def write_heatmap_csv(path, grid: np.ndarray) -> None:
    """H rows of W comma-separated float32 values."""
    np.savetxt(path, np.asarray(grid, dtype=np.float32), fmt="%.9g", delimiter=",")


def read_heatmap_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2)


def write_heatmap_png(path, grid: np.ndarray) -> None:
    g = np.asarray(grid, dtype=float)
    peak = g.max()
    write_png(path, g / peak if peak > 0 else g)
