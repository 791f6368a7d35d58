"""Bayes-optimal output denoisers g_out for the channel catalog.

Public surface: z_out, g_out, g_out_jacobian, conditional_second_moment
(single-sample convenience wrappers) and evaluate_batch (the vectorized
entry point used by state evolution, stability, and AMP).
"""

from dataclasses import dataclass

import numpy as np

from ..errors import DimensionMismatch
from ._common import VPack
from . import closedform, signpattern, squareparity, smoothed


@dataclass(frozen=True)
class QuadratureConfig:
    cutoff: float = 10.0          # |y| (or |z|) truncation for quadrature
    v_reg: float = 1e-4           # eigenvalue floor for V
    abs_tol: float = 1e-8
    rel_tol: float = 1e-6
    max_subdivisions: int = 50
    # Smoothed-backend budget. The kernel width trades O(smoothing^2) bias
    # against importance-sample survival: the acceptance fraction scales
    # like smoothing/std(y), so a much narrower kernel starves the inner
    # sampler (effective sample size -> 1) and the posterior-mean estimates
    # collapse toward the prior draws, which is a far larger bias.
    smoothing: float = 0.02
    mc_inner: int = 8192
    seed: int = 0                 # smoothed-backend draw stream


@dataclass(frozen=True)
class DenoiserEval:
    value: np.ndarray
    jacobian: np.ndarray
    z_out: float
    backend_used: str
    est_error: float


def _isotropic_shared(pack, omega):
    if pack.batched:
        return False
    V = pack.V
    v = V[0, 0]
    if np.max(np.abs(V - v * np.eye(pack.p))) > 1e-12 * max(v, 1.0):
        return False
    return np.max(np.abs(omega)) < 1e-12


def evaluate_batch(channel, y, omega, V, cfg=None, seed=None, need=None):
    """Posterior summaries for a batch of (y_i, omega_i) under shared or
    per-sample V. Returns a dict with z_out (n,), value (n,p),
    jacobian (n,p,p), est_error (n,), value_cov (n,p,p) or None,
    backend_used, plus raw moments m and S.

    need: optional tuple drawn from {"value", "jacobian", "moments",
    "value_cov"}. The expensive engines (sign patterns, smoothed MC) skip
    second-moment and jacobian work that nothing downstream consumes;
    omitted outputs come back None. Default is everything."""
    cfg = cfg or QuadratureConfig()
    y = np.atleast_1d(np.asarray(y, float))
    omega = np.atleast_2d(np.asarray(omega, float))
    n = y.shape[0]
    p = channel.p
    if omega.shape != (n, p):
        raise DimensionMismatch(
            f"omega shape {omega.shape}, expected ({n},{p})")
    pack = VPack(V, p, n, cfg.v_reg)
    kind = channel.spec.kind
    if seed is None:
        seed = cfg.seed
    order = 2
    if need is not None and "jacobian" not in need and "moments" not in need:
        order = 1

    if kind == "sum-squares" and channel.noise == 0.0 and p >= 2 \
            and _isotropic_shared(pack, omega):
        # exact for every p, and the only accurate route at p >= 4
        out = closedform.sumsq_isotropic(pack, y, omega, p)
        used = "analytic"
    elif channel.backend == "smoothed":
        out = smoothed.smoothed_eval(channel, pack, y, omega, cfg, seed,
                                     need=need)
        used = "smoothed"
    elif kind in ("parity", "committee"):
        out = signpattern.signpattern_eval(channel, pack, y, omega,
                                           order=order)
        used = "orthant" if p >= 3 else "analytic"
    elif kind == "square-plus-parity":
        out = squareparity.squareparity_eval(channel, pack, y, omega)
        used = "analytic"
    elif kind == "linear" or (kind == "monomial" and p == 1):
        out = closedform.linear_eval(pack, y, omega, channel.noise)
        used = "analytic"
    elif kind == "monomial":
        out = closedform.monomial2_eval(pack, y, omega)
        used = "analytic"
    elif kind == "sum-squares":
        if p == 1:
            out = closedform.polyroots_eval(pack, y, omega, ((1.0, (2,)),))
        elif _isotropic_shared(pack, omega):
            out = closedform.sumsq_isotropic(pack, y, omega, p)
        else:
            out = closedform.sumsq_sphere(pack, y, omega, p)
        used = "analytic"
    elif kind == "poly":
        out = closedform.polyroots_eval(pack, y, omega, channel.spec.terms)
        used = "analytic"
    else:
        out = smoothed.smoothed_eval(channel, pack, y, omega, cfg, seed,
                                     need=need)
        used = "smoothed"

    out.setdefault("value_cov", None)
    out["backend_used"] = used
    return out


def _single(channel, y, omega, V, cfg):
    p = channel.p
    omega = np.asarray(omega, float).reshape(1, p)
    V = np.asarray(V, float)
    if V.ndim == 0:
        V = V.reshape(1, 1)
    return evaluate_batch(channel, np.atleast_1d(float(y)), omega, V, cfg)


def z_out(channel, y, omega, V, cfg=None):
    """Marginal label density/mass Z_out(y; omega, V)."""
    return float(_single(channel, y, omega, V, cfg)["z_out"][0])


def g_out(channel, y, omega, V, cfg=None):
    """Posterior score V^{-1}(E[z | y, omega, V] - omega)."""
    return _single(channel, y, omega, V, cfg)["value"][0]


def g_out_jacobian(channel, y, omega, V, cfg=None):
    """d g_out / d omega, a p x p matrix."""
    return _single(channel, y, omega, V, cfg)["jacobian"][0]


def g_out_eval(channel, y, omega, V, cfg=None):
    """Single-sample evaluation bundled as a DenoiserEval record."""
    out = _single(channel, y, omega, V, cfg)
    return DenoiserEval(value=out["value"][0], jacobian=out["jacobian"][0],
                        z_out=float(out["z_out"][0]),
                        backend_used=out["backend_used"],
                        est_error=float(out["est_error"][0]))


def conditional_second_moment(channel, y, cfg=None):
    """E[z z^T - I | y] at omega = 0, V = I, by the moment route."""
    p = channel.p
    out = _single(channel, y, np.zeros(p), np.eye(p), cfg)
    return out["S"][0] - np.eye(p)
