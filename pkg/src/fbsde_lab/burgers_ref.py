"""Closed-form reference objects for the inviscid limit.

The rarefaction profile ``psi``, the exact characteristics of the first-order
conservation law, the drift-compensator ``w(t, p) = -E[int_t^T f(P_s, 0) ds]``
(closed forms for the affine families, Monte Carlo quadrature otherwise) and
the sup-norm gap between a computed value field and the rescaled profile.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .model_core import ModelSpec, effective_ell


def psi(x):
    """Rarefaction profile: identity on [0,1], clamped outside."""
    return np.clip(np.asarray(x, dtype=float), 0.0, 1.0)


@dataclass(frozen=True)
class BurgersProfile:
    ell: float
    cap_lambda: float
    horizon_T: float

    def __post_init__(self):
        if self.ell <= 0:
            raise ValueError("ell must be positive")


def inviscid_value(profile: BurgersProfile, t: float, e_bar) -> np.ndarray:
    """Value of the inviscid terminal-value problem at (t, e_bar)."""
    if t >= profile.horizon_T:
        raise ValueError("t must be < horizon_T")
    scale = profile.ell * (profile.horizon_T - t)
    return psi((np.asarray(e_bar, dtype=float) - profile.cap_lambda) / scale)


def characteristic(e0, t0: float, t: float, profile: BurgersProfile):
    """Exact characteristic position at time t started from e0 at t0.

    Outside the cone the motion is trivial (frozen below the cap, uniform
    speed ell above); inside the cone [cap, cap + ell*(T - t0)] the fan
    contracts linearly and collapses onto the cap at t = T.
    """
    T, lam, ell = profile.horizon_T, profile.cap_lambda, profile.ell
    if not (t0 <= t <= T):
        raise ValueError("need t0 <= t <= T")
    e0 = np.asarray(e0, dtype=float)
    width = ell * (T - t0)
    below = e0 < lam
    above = e0 > lam + width
    inside = ~below & ~above
    out = np.where(below, e0, 0.0)
    out = np.where(above, e0 - ell * (t - t0), out)
    frac = np.where(T > t0, (t - t0) / (T - t0), 1.0)
    out = np.where(inside, e0 - (e0 - lam) * frac, out)
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# the compensator w
# ---------------------------------------------------------------------------

@dataclass
class WEvaluator:
    """Evaluator for w(t, p), its p-gradient and the noise integrand.

    ``mode`` is ``closed_form_affine``, ``closed_form_linear_drift`` or
    ``monte_carlo``.  Closed forms are exact; the Monte Carlo mode uses
    antithetic Euler quadrature with per-call deterministic streams and
    reports a standard error.  ``warned`` is set when the Monte Carlo
    budget failed to reach ``se_target``.
    """

    mode: str
    model: ModelSpec
    n_paths: int = 20_000
    n_steps: int = 500
    seed: int = 2024
    se_target: Optional[float] = None
    warned: bool = field(default=False, init=False)

    def __post_init__(self):
        if self.mode not in ("closed_form_affine", "closed_form_linear_drift",
                             "monte_carlo"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "closed_form_affine" and self.model.family != "affine_constant":
            raise ValueError("closed_form_affine requires the affine_constant family")
        if self.mode == "closed_form_linear_drift" and self.model.family != "linear_drift":
            raise ValueError("closed_form_linear_drift requires the linear_drift family")

    # -- closed forms -----------------------------------------------------

    def _affine(self, t, p):
        pr = self.model.family_params
        alpha, b = pr["alpha"], pr["b"]
        s = self.model.horizon_T - np.asarray(t, dtype=float)
        p = np.asarray(p, dtype=float)
        return s * (np.tensordot(p, alpha, axes=([-1], [0]))
                    + 0.5 * s * float(alpha @ b))

    def _linear_drift(self, t, p):
        pr = self.model.family_params
        lam, alpha, b0 = pr["lam"], pr["alpha"], pr["b0"]
        s = self.model.horizon_T - np.asarray(t, dtype=float)
        p0 = np.asarray(p, dtype=float)[..., 0]
        if lam == 0.0:
            return alpha * s * (p0 + 0.5 * b0 * s)
        growth = (np.exp(lam * s) - 1.0) / lam
        return alpha * ((p0 + b0 / lam) * growth - (b0 / lam) * s)

    def dp_w(self, t, p=None) -> np.ndarray:
        """Gradient of w in p (closed-form modes; finite differences for MC)."""
        s = self.model.horizon_T - np.asarray(t, dtype=float)
        if self.mode == "closed_form_affine":
            alpha = self.model.family_params["alpha"]
            return np.asarray(s)[..., None] * alpha
        if self.mode == "closed_form_linear_drift":
            pr = self.model.family_params
            lam, alpha = pr["lam"], pr["alpha"]
            if lam == 0.0:
                return (alpha * np.asarray(s))[..., None]
            return (alpha * (np.exp(lam * s) - 1.0) / lam)[..., None]
        if p is None:
            raise ValueError("monte_carlo dp_w needs the evaluation point p")
        p = np.asarray(p, dtype=float)
        h = 1e-4 * max(1.0, float(np.max(np.abs(p))))
        g = np.empty(self.model.dim_p)
        for i in range(self.model.dim_p):
            dp = np.zeros_like(p); dp[..., i] = h
            g[i] = (self._mc(t, p + dp)[0] - self._mc(t, p - dp)[0]) / (2 * h)
        return g

    # -- Monte Carlo quadrature -------------------------------------------

    def _mc(self, t, p):
        model = self.model
        T = model.horizon_T
        s = T - float(t)
        if s <= 0:
            return 0.0, 0.0
        n_half = self.n_paths // 2
        n_steps = max(1, int(round(self.n_steps * s / T)))
        dt = s / n_steps
        key = (self.seed * 0x9E3779B9 + hash((round(float(t), 12),
                                              tuple(np.round(np.atleast_1d(p), 12))))) % (2**63)
        rng = np.random.Generator(np.random.Philox(key=key))
        d = model.dim_p
        P = np.broadcast_to(np.asarray(p, dtype=float), (n_half, d)).copy()
        Pa = P.copy()
        acc = np.zeros(n_half)
        acc_a = np.zeros(n_half)
        for _ in range(n_steps):
            acc += model.feedback.f_at_zero(P) * dt
            acc_a += model.feedback.f_at_zero(Pa) * dt
            dW = rng.standard_normal((n_half, d)) * np.sqrt(dt)
            sig = model.diffusion(P)
            sig_a = model.diffusion(Pa)
            P = P + model.drift(P) * dt + np.einsum("nij,nj->ni", sig, dW)
            Pa = Pa + model.drift(Pa) * dt - np.einsum("nij,nj->ni", sig_a, dW)
        pair = -0.5 * (acc + acc_a)
        est = float(np.mean(pair))
        se = float(np.std(pair, ddof=1) / np.sqrt(n_half))
        return est, se

    # -- public interface --------------------------------------------------

    def evaluate(self, t, p):
        """w(t, p); vectorized over t and p for the closed-form modes."""
        if self.mode == "closed_form_affine":
            return self._affine(t, p)
        if self.mode == "closed_form_linear_drift":
            return self._linear_drift(t, p)
        est, se = self._mc(t, p)
        if self.se_target is not None and se > self.se_target:
            self.warned = True
        return est

    def evaluate_with_se(self, t, p):
        if self.mode == "monte_carlo":
            est, se = self._mc(t, p)
            if self.se_target is not None and se > self.se_target:
                self.warned = True
            return est, se
        return self.evaluate(t, p), 0.0

    def __call__(self, t, p):
        return self.evaluate(t, p)

    def noise_integrand(self, t, p):
        """sigma^T(p) dp_w(t, p), the integrand of the martingale part of Ebar."""
        p = np.asarray(p, dtype=float)
        sig = self.model.diffusion(p)
        g = self.dp_w(t, p if self.mode == "monte_carlo" else None)
        g = np.broadcast_to(g, p.shape)
        return np.einsum("...ji,...j->...i", sig, g)


def w_eval(we: WEvaluator, t, p):
    """Functional form of ``WEvaluator.evaluate``."""
    return we.evaluate(t, p)


# ---------------------------------------------------------------------------
# gap against the rescaled profile
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GapTable:
    t: np.ndarray
    sup_gap: np.ndarray
    beta_hat: float
    horizon: float

    def rows(self):
        """(t, sup_gap, fitted beta so far) rows for CSV export."""
        out = []
        for k in range(len(self.t)):
            if k >= 1:
                x = np.log(self.horizon - self.t[: k + 1])
                y = np.log(np.maximum(1e-300, self.sup_gap[: k + 1]))
                beta = float(np.polyfit(x, y, 1)[0])
            else:
                beta = float("nan")
            out.append((float(self.t[k]), float(self.sup_gap[k]), beta))
        return out


def burgers_gap(field, we: WEvaluator, model: ModelSpec, t_list,
                boundary_skip: int = 2, p_boundary_frac: float = 0.2) -> GapTable:
    """Per-time sup distance between the field and the rescaled profile.

    At each requested time the gap is the sup over grid nodes of
    ``|v(t,p,e) - psi((ebar - cap)/(ell (T-t)))`` with ``ebar = e + w(t,p)``
    and the effective slope computed from the field's own value at the node
    (constant gamma for the affine families).  Nodes within ``boundary_skip``
    cells of the e-boundary are excluded, as is the outer ``p_boundary_frac``
    of each p-axis (both are artificial-boundary layers, not part of the
    whole-space statement being measured).  ``beta_hat`` is the slope of
    log gap against log(T - t).
    """
    T = model.horizon_T
    lam = model.cap_lambda
    affine = model.family in ("affine_constant", "linear_drift")
    gamma = model.family_params.get("gamma")
    e = field.grid.e_nodes
    sl = slice(boundary_skip, len(e) - boundary_skip) if boundary_skip else slice(None)
    e_in = e[sl]
    gaps = []
    for t in t_list:
        s = T - float(t)
        if s <= 0:
            raise ValueError("t_list must lie strictly before the horizon")
        if field.grid.dim == 0:
            v = field.values_at(t)[sl]
            ebar = e_in
            ell = gamma if affine else effective_ell(model, np.zeros(model.dim_p), v)
            gap = np.abs(v - psi((ebar - lam) / (ell * s)))
            gaps.append(float(np.max(gap)))
            continue
        worst = 0.0
        vt = field.values_at(t)
        skips = [int(p_boundary_frac * len(nodes)) for nodes in field.grid.p_nodes]
        p_axes = []
        for axis, (nodes, k) in enumerate(zip(field.grid.p_nodes, skips)):
            p_axes.append(nodes[k: len(nodes) - k] if k else nodes)
            if k:
                vt = np.take(vt, np.arange(k, len(nodes) - k), axis=axis)
        mesh = np.meshgrid(*p_axes, indexing="ij")
        p_pts = np.stack([m.reshape(-1) for m in mesh], axis=-1)
        w_vals = np.array([we.evaluate(t, pp) for pp in p_pts])
        v_flat = vt.reshape(len(p_pts), len(e))[:, sl]
        for i, pp in enumerate(p_pts):
            ebar = e_in + w_vals[i]
            if affine:
                ell = gamma
            else:
                ell = effective_ell(model, pp, v_flat[i])
            gap = np.abs(v_flat[i] - psi((ebar - lam) / (ell * s)))
            worst = max(worst, float(np.max(gap)))
        gaps.append(worst)
    t_arr = np.asarray(list(t_list), dtype=float)
    g_arr = np.asarray(gaps)
    x = np.log(T - t_arr)
    y = np.log(np.maximum(g_arr, 1e-300))
    beta_hat = float(np.polyfit(x, y, 1)[0]) if len(t_arr) >= 2 else float("nan")
    return GapTable(t=t_arr, sup_gap=g_arr, beta_hat=beta_hat, horizon=T)
