"""Finite-dimensional Bayes-optimal message passing on sampled datasets.

Each sweep alternates an output pass (fields omega_i, posterior messages
g_i from the output denoiser) with an input pass (pseudo-data b_k denoised
under the Gaussian prior). Side information S = sqrt(lam) W* +
sqrt(1-lam) Z acts as a modified prior; combining its likelihood with the
Onsager pseudo-data gives the input update

    W_k = (I + (1-lam) A_k)^{-1} ((1-lam) b_k + sqrt(lam) S_k)
    C_k = (1-lam) (I + (1-lam) A_k)^{-1}

which reduces to the plain update at lam = 0, pins W_k = S_k at lam = 1,
and matches the side-information form of the state-evolution map. The
first output message g^0 is zero: nothing has flowed back before the
first sweep.

Two Onsager modes: "exact" keeps per-coordinate A_k and per-sample V_i;
"averaged" replaces the squared-covariate weights by their mean 1/d, so a
single (p, p) pair is shared by all coordinates and samples.
"""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .denoisers import QuadratureConfig, evaluate_batch
from .errors import (DenoiserFailure, DimensionMismatch, InvalidSpec,
                     SingularOnsager)
from .rng import stream


@dataclass(frozen=True)
class AmpConfig:
    max_iter: int = 200
    damping: float = 0.8          # applied to W_hat only
    lam: float = 0.0              # side-information snr in [0, 1]
    onsager_mode: str = "averaged"   # "averaged" or "exact"
    tol: float = 1e-6             # relative fixed-point residual on W_hat
    seed: int = 0
    record_every: int = 1


@dataclass(frozen=True)
class AmpState:
    """One sweep's worth of algorithm state.

    W_hat (p, d) is the estimator; C_hat its per-coordinate posterior
    covariance, a single (p, p) in averaged mode or (d, p, p) in exact
    mode; g_msgs / prev_g (n, p) the last two output messages; omega and
    V the fields the latest messages were computed at. side_info is the
    (p, d) matrix S, or None when lam = 0.
    """
    W_hat: np.ndarray
    C_hat: np.ndarray
    g_msgs: np.ndarray
    omega: np.ndarray
    V: np.ndarray
    prev_g: np.ndarray
    side_info: Optional[np.ndarray] = None


@dataclass(frozen=True)
class AmpResult:
    overlap_trajectory: tuple        # (p, p) arrays, W_hat W*^T / d
    self_overlap_trajectory: tuple   # (p, p) arrays, W_hat W_hat^T / d
    gen_error_trajectory: tuple      # held-out plug-in label MSE
    aligned_final_overlap: np.ndarray
    iterations: int
    converged: bool
    recorded_iterations: tuple


def _validate(cfg):
    if not 0.0 < cfg.damping <= 1.0:
        raise InvalidSpec(f"damping {cfg.damping} outside (0, 1]")
    if not 0.0 <= cfg.lam <= 1.0:
        raise InvalidSpec(f"lam {cfg.lam} outside [0, 1]")
    if cfg.onsager_mode not in ("averaged", "exact"):
        raise InvalidSpec(f"unknown onsager_mode {cfg.onsager_mode!r}")
    if cfg.record_every < 1:
        raise InvalidSpec("record_every must be at least 1")


def _side_info(dataset, cfg):
    """S = sqrt(lam) W* + sqrt(1-lam) Z on its own stream, so a resumed
    run regenerates the identical matrix from (seed, lam)."""
    Z = stream(cfg.seed, "amp-side").standard_normal(dataset.W_star.shape)
    return (math.sqrt(cfg.lam) * dataset.W_star
            + math.sqrt(1.0 - cfg.lam) * Z)


def amp_init(dataset, channel, cfg):
    """Starting state: W_hat rows i.i.d. standard Gaussian at lam = 0, the
    modified-prior posterior mean sqrt(lam) S otherwise; C_hat = I per
    coordinate and g = 0 (the first sweep overwrites both)."""
    _validate(cfg)
    p = channel.p
    if dataset.W_star.shape[0] != p:
        raise DimensionMismatch(
            f"teacher has {dataset.W_star.shape[0]} rows, channel p={p}")
    if dataset.X.shape[0] != dataset.y.shape[0]:
        raise DimensionMismatch("X and y row counts differ")
    n, d = dataset.n, dataset.d
    if cfg.lam > 0.0:
        S = _side_info(dataset, cfg)
        W0 = math.sqrt(cfg.lam) * S
    else:
        S = None
        W0 = stream(cfg.seed, "amp-init").standard_normal((p, d))
    if cfg.onsager_mode == "averaged":
        C0 = np.eye(p)
        V0 = np.eye(p)
    else:
        C0 = np.tile(np.eye(p), (d, 1, 1))
        V0 = np.tile(np.eye(p), (n, 1, 1))
    g0 = np.zeros((n, p))
    return AmpState(W_hat=W0, C_hat=C0, g_msgs=g0, omega=np.zeros((n, p)),
                    V=V0, prev_g=g0, side_info=S)


def _solve_prior(lhs, rhs, lam, eps):
    """W = lhs^{-1} rhs and C = (1-lam) lhs^{-1}, retrying once with an
    eps ridge; works on a single (p, p) system or a (d, p, p) batch.

    C is clamped to eigenvalues in [0, 1]: a posterior covariance under
    the unit Gaussian prior cannot leave that range, but transients can
    push I + (1-lam) A indefinite before the Onsager matrix settles, and
    a negative C would poison every downstream V."""
    p = lhs.shape[-1]
    batched = lhs.ndim == 3
    for bump in (0.0, eps):
        try:
            mat = lhs + bump * np.eye(p)
            if batched:
                W = np.linalg.solve(mat, rhs[..., None])[..., 0]
            else:
                W = np.linalg.solve(mat, rhs)
            C = (1.0 - lam) * np.linalg.inv(mat)
            C = 0.5 * (C + np.swapaxes(C, -1, -2))
            w, Q = np.linalg.eigh(C)
            w = np.clip(w, 0.0, 1.0)
            C = np.einsum('...ab,...b,...cb->...ac', Q, w, Q)
            return W, C
        except np.linalg.LinAlgError:
            continue
    raise SingularOnsager(
        "I + (1-lam) A is singular even after regularization")


def amp_step(state, dataset, channel, cfg, quad=None):
    """One full sweep; damping acts on W_hat only, g messages undamped."""
    quad = quad or QuadratureConfig()
    X, y = dataset.X, dataset.y
    n, d = X.shape
    p = channel.p
    lam = cfg.lam
    averaged = cfg.onsager_mode == "averaged"
    X2 = X * X

    if averaged:
        V = state.C_hat
        omega = X @ state.W_hat.T - state.g_msgs @ V.T
    else:
        V = np.einsum('ik,kab->iab', X2, state.C_hat, optimize=True)
        V = 0.5 * (V + V.transpose(0, 2, 1))
        omega = X @ state.W_hat.T - np.einsum('iab,ib->ia', V,
                                              state.g_msgs)

    out = evaluate_batch(channel, y, omega, V, quad, seed=cfg.seed,
                         need=("value", "jacobian"))
    g = out["value"]
    J = out["jacobian"]
    bad = ~(np.isfinite(g).all(axis=1) & np.isfinite(J).all(axis=(1, 2)))
    if bad.any():
        i = int(np.argmax(bad))
        raise DenoiserFailure(
            f"non-finite denoiser output at sample {i}", sample_index=i)

    if averaged:
        A = -(n / d) * J.mean(axis=0)
        A = 0.5 * (A + A.T)
        b = g.T @ X + A @ state.W_hat                       # (p, d)
        rhs = (1.0 - lam) * b
        if lam > 0.0:
            rhs = rhs + math.sqrt(lam) * state.side_info
        W_new, C_new = _solve_prior(np.eye(p) + (1.0 - lam) * A, rhs,
                                    lam, quad.v_reg)
    else:
        A = -np.einsum('ik,iab->kab', X2, J, optimize=True)  # (d, p, p)
        A = 0.5 * (A + A.transpose(0, 2, 1))
        b = X.T @ g + np.einsum('kab,bk->ka', A, state.W_hat,
                                optimize=True)               # (d, p)
        rhs = (1.0 - lam) * b
        if lam > 0.0:
            rhs = rhs + math.sqrt(lam) * state.side_info.T
        Wk, C_new = _solve_prior(np.eye(p) + (1.0 - lam) * A, rhs,
                                 lam, quad.v_reg)
        W_new = Wk.T

    W_damped = cfg.damping * W_new + (1.0 - cfg.damping) * state.W_hat
    return AmpState(W_hat=W_damped, C_hat=C_new, g_msgs=g, omega=omega,
                    V=V, prev_g=state.g_msgs, side_info=state.side_info)


def _gen_error(channel, W_hat, X_test, y_test):
    y_hat = channel.link(X_test @ W_hat.T)
    return float(np.mean((y_test - y_hat) ** 2))


def amp_run(dataset, channel, cfg, quad=None):
    """Iterate sweeps until the relative W_hat residual drops below
    cfg.tol or max_iter; overlap / self-overlap / held-out error are
    recorded every record_every sweeps plus the initial and final states.
    Non-convergence is reported through converged=False, not an error."""
    state = amp_init(dataset, channel, cfg)
    d = dataset.d
    Ws = dataset.W_star
    m = min(10_000, dataset.n)
    X_test = stream(cfg.seed, "amp-test-X").standard_normal(
        (m, d)) / math.sqrt(d)
    y_test = channel.evaluate(X_test @ Ws.T,
                              stream(cfg.seed, "amp-test-noise"))

    overlaps, selfs, gens, recorded = [], [], [], []

    def record(t, st):
        overlaps.append(st.W_hat @ Ws.T / d)
        selfs.append(st.W_hat @ st.W_hat.T / d)
        gens.append(_gen_error(channel, st.W_hat, X_test, y_test))
        recorded.append(t)

    record(0, state)
    converged = False
    t = 0
    for t in range(1, cfg.max_iter + 1):
        new = amp_step(state, dataset, channel, cfg, quad)
        denom = max(float(np.linalg.norm(state.W_hat)), 1e-300)
        rel = float(np.linalg.norm(new.W_hat - state.W_hat)) / denom
        state = new
        converged = rel < cfg.tol
        if t % cfg.record_every == 0 or converged or t == cfg.max_iter:
            record(t, state)
        if converged:
            break

    aligned = align_overlap(overlaps[-1], channel)
    return AmpResult(overlap_trajectory=tuple(overlaps),
                     self_overlap_trajectory=tuple(selfs),
                     gen_error_trajectory=tuple(gens),
                     aligned_final_overlap=aligned,
                     iterations=t, converged=converged,
                     recorded_iterations=tuple(recorded))


def align_overlap(M_raw, channel):
    """Report the overlap through the channel symmetry: the declared
    (permutation, signs) element maximizing the trace of Gamma M_raw, ties
    to the lexicographically smallest permutation. Never rescales."""
    M = np.asarray(M_raw, float)
    p = channel.p
    sigs = np.asarray(channel.symmetry.sign_patterns, float)
    best_tr = -np.inf
    best = None
    for perm in sorted(channel.symmetry.permutations()):
        rows = np.asarray(perm)
        c = M[rows, np.arange(p)]
        scores = sigs @ c
        j = int(np.argmax(scores))
        if scores[j] > best_tr:
            best_tr = float(scores[j])
            best = (rows, sigs[j])
    rows, sig = best
    return sig[:, None] * M[rows, :]


# ------------------------------------------------------------ checkpoints

def save_checkpoint(path, state, iteration):
    """Binary layout: little-endian int64 header {p, d, n, iter}, then
    row-major float64 W_hat, C_hat, g_msgs. C_hat is (p, p) in averaged
    mode and (d, p, p) in exact mode; the reader tells them apart by the
    remaining length."""
    p, d = state.W_hat.shape
    n = state.g_msgs.shape[0]
    with open(path, "wb") as f:
        np.asarray([p, d, n, iteration], dtype="<i8").tofile(f)
        np.ascontiguousarray(state.W_hat, dtype="<f8").tofile(f)
        np.ascontiguousarray(state.C_hat, dtype="<f8").tofile(f)
        np.ascontiguousarray(state.g_msgs, dtype="<f8").tofile(f)


def load_checkpoint(path, dataset, channel, cfg):
    """Rebuild (state, iteration) for resuming. omega / V / prev_g are
    placeholders, recomputed by the next sweep from (C_hat, W_hat, g);
    side information is regenerated from cfg.seed, so resuming needs the
    original config."""
    with open(path, "rb") as f:
        head = np.fromfile(f, dtype="<i8", count=4)
        if head.size != 4:
            raise DimensionMismatch("checkpoint shorter than its header")
        p, d, n, it = (int(v) for v in head)
        W = np.fromfile(f, dtype="<f8", count=p * d).reshape(p, d)
        rest = np.fromfile(f, dtype="<f8")
    if p != channel.p or d != dataset.d or n != dataset.n:
        raise DimensionMismatch(
            f"checkpoint ({p},{d},{n}) does not match dataset/channel")
    if rest.size == d * p * p + n * p:
        averaged = False
        C = rest[:d * p * p].reshape(d, p, p)
        g = rest[d * p * p:].reshape(n, p)
    elif rest.size == p * p + n * p:
        averaged = True
        C = rest[:p * p].reshape(p, p)
        g = rest[p * p:].reshape(n, p)
    else:
        raise DimensionMismatch("checkpoint length matches neither mode")
    if averaged != (cfg.onsager_mode == "averaged"):
        raise DimensionMismatch(
            "checkpoint Onsager mode does not match cfg.onsager_mode")
    V0 = np.eye(p) if averaged else np.tile(np.eye(p), (n, 1, 1))
    S = _side_info(dataset, cfg) if cfg.lam > 0.0 else None
    st = AmpState(W_hat=W, C_hat=C, g_msgs=g, omega=np.zeros((n, p)),
                  V=V0, prev_g=np.zeros((n, p)), side_info=S)
    return st, it
