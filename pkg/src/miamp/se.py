"""State evolution: the deterministic overlap recursion M' = F(M).

The Monte Carlo expectation uses streams keyed by (seed, chunk), identical
across iterations, so a run iterates a fixed deterministic map and the
convergence test is meaningful at finite sample counts.

Side information of strength lam enters through the map
    M' = I - inv(I + X + lam/(1-lam) * P),
where X = alpha * E[g_out^{(x2)}] and P projects onto the side-informed
subspace (identity when unrestricted). Restricted runs additionally project
iterates back onto U-supported matrices; exact denoisers never leave that
set, the projection only removes Monte Carlo leakage from smoothed ones.
"""

from dataclasses import dataclass, field

import numpy as np

from .denoisers import QuadratureConfig, evaluate_batch
from .errors import InvalidSpec
from .rng import stream

_CHUNK = 8192


def sqrtm_psd(M):
    w, Q = np.linalg.eigh(M)
    w = np.maximum(w, 0.0)
    return (Q * np.sqrt(w)) @ Q.T


@dataclass(frozen=True)
class OverlapMatrix:
    """Symmetric p x p overlap, eigenvalues clamped to [0, 1] on build."""
    entries: np.ndarray

    def __init__(self, entries):
        A = np.asarray(entries, float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise InvalidSpec("overlap matrix must be square")
        if np.max(np.abs(A - A.T)) > 1e-8:
            raise InvalidSpec("overlap matrix must be symmetric")
        A = 0.5 * (A + A.T)
        w, Q = np.linalg.eigh(A)
        w = np.clip(w, 0.0, 1.0)
        object.__setattr__(self, "entries", (Q * w) @ Q.T)

    @property
    def p(self):
        return self.entries.shape[0]

    def sqrt(self):
        return sqrtm_psd(self.entries)

    def complement_sqrt(self):
        return sqrtm_psd(np.eye(self.p) - self.entries)

    def __array__(self, dtype=None, copy=None):
        return np.array(self.entries, dtype=dtype)


@dataclass(frozen=True)
class SEConfig:
    alpha: float
    lam: float = 0.0              # side-information snr (lambda)
    damping: float = 0.7
    mc_samples: int = 72000
    tol: float = 1e-4
    max_iter: int = 200
    seed: int = 0
    restrict_to: object = None    # (p, k) orthonormal basis or None
    quad: QuadratureConfig = field(default_factory=QuadratureConfig)


@dataclass
class SETrajectory:
    states: list
    gen_errors: list
    converged: bool
    fixed_point: OverlapMatrix
    iterations: int
    plateau_segments: list


def _effective_samples(channel, M, cfg):
    """(omega, y, V) draws from the effective label process at overlap M.

    M eigenvalues are capped at 1 - v_reg so the sampling law and the
    denoiser see the same regularized V; without this, perfect-recovery
    states produce zero-residual labels that the clamped denoiser then
    misreads as pure noise.
    """
    p = channel.p
    w, Q = np.linalg.eigh(M.entries)
    w = np.clip(w, 0.0, 1.0 - cfg.quad.v_reg)
    Me = (Q * w) @ Q.T
    sq = (Q * np.sqrt(w)) @ Q.T
    Vsq = (Q * np.sqrt(1.0 - w)) @ Q.T
    V = np.eye(p) - Me
    mc = cfg.mc_samples
    even = tuple([-1.0] * p) in set(map(tuple, channel.symmetry.sign_patterns))
    omega = np.empty((mc, p))
    y = np.empty(mc)
    pos = 0
    ci = 0
    while pos < mc:
        take = min(_CHUNK, mc - pos)
        xi = stream(cfg.seed, "se-xi", ci).standard_normal((take, p))
        if even:
            half = (take + 1) // 2
            z = stream(cfg.seed, "se-z", ci).standard_normal((half, p))
            z = np.concatenate([z, -z], axis=0)[:take]
        else:
            z = stream(cfg.seed, "se-z", ci).standard_normal((take, p))
        om = xi @ sq.T
        zfull = om + z @ Vsq.T
        y[pos:pos + take] = channel.evaluate(
            zfull, stream(cfg.seed, "se-noise", ci))
        omega[pos:pos + take] = om
        pos += take
        ci += 1
    return omega, y, V


def _apply_G(X, lam, P):
    p = X.shape[0]
    if lam >= 1.0 - 1e-12:
        return np.eye(p)
    A = np.eye(p) + X
    if lam > 0.0:
        A = A + (lam / (1.0 - lam)) * P
    return np.eye(p) - np.linalg.inv(A)


def _se_update_info(channel, M, cfg):
    p = channel.p
    omega, y, V = _effective_samples(channel, M, cfg)
    out = evaluate_batch(channel, y, omega, V, cfg.quad, seed=cfg.seed,
                         need=("value", "value_cov"))
    g = out["value"]
    gg = np.einsum('ia,ib->iab', g, g)
    X = gg.mean(axis=0)
    stderr = gg.std(axis=0) / np.sqrt(len(y))
    if out["value_cov"] is not None:
        X = X - out["value_cov"].mean(axis=0)
    X = cfg.alpha * 0.5 * (X + X.T)
    P = np.eye(p)
    if cfg.restrict_to is not None:
        U = np.asarray(cfg.restrict_to, float)
        P = U @ U.T
    Mn = _apply_G(X, cfg.lam, P)
    if cfg.restrict_to is not None:
        Mn = P @ Mn @ P
    return OverlapMatrix(Mn), {"X": X, "stderr": cfg.alpha * stderr,
                               "mc_error": float(cfg.alpha * stderr.max())}


def se_update(channel, M, cfg):
    """One undamped application of the overlap map."""
    return _se_update_info(channel, M, cfg)[0]


def generalization_error(channel, M, cfg, literal=False, return_stderr=False):
    """Plug-in label MSE at overlap M (the literal two-process formula is
    kept behind literal=True; it does not vanish at M = I)."""
    p = channel.p
    sq = M.sqrt() if isinstance(M, OverlapMatrix) else sqrtm_psd(M)
    Vsq = sqrtm_psd(np.eye(p) - (M.entries if isinstance(M, OverlapMatrix) else M))
    mc = cfg.mc_samples
    xi = stream(cfg.seed, "gen-xi").standard_normal((mc, p))
    z = stream(cfg.seed, "gen-z").standard_normal((mc, p))
    full = xi @ sq.T + z @ Vsq.T
    y_true = channel.link(full)
    y_hat = channel.link(z) if literal else channel.link(xi @ sq.T)
    sqerr = (y_true - y_hat) ** 2
    val = float(sqerr.mean())
    if return_stderr:
        return val, float(sqerr.std() / np.sqrt(mc))
    return val


def detect_plateaus(deltas, values, enter_tol, exit_jump, min_len=5):
    """Maximal runs with per-step delta < enter_tol that later exit.

    deltas[t] is the step size from t to t+1; values[t] a scalar summary
    (Frobenius norm) used to measure the exit jump. Returns (start, end)
    index pairs into the state list; runs that never exit are dropped.
    """
    T = len(deltas)
    segs = []
    t = 0
    while t < T:
        if deltas[t] < enter_tol:
            s = t
            while t < T and deltas[t] < enter_tol:
                t += 1
            if t - s >= min_len and t < T:
                later = np.asarray(values[t:])
                if np.max(np.abs(later - values[s])) >= exit_jump:
                    segs.append((s, t))
        else:
            t += 1
    return segs


def se_run(channel, M0, cfg):
    """Damped fixed-point iteration of the overlap map."""
    M = M0 if isinstance(M0, OverlapMatrix) else OverlapMatrix(M0)
    states = [M]
    gen_errors = [generalization_error(channel, M, cfg)]
    deltas = []
    consec = 0
    converged = False
    iterations = 0
    for t in range(cfg.max_iter):
        Mn_raw = se_update(channel, M, cfg)
        Mn = OverlapMatrix(cfg.damping * Mn_raw.entries
                           + (1.0 - cfg.damping) * M.entries)
        d = float(np.linalg.norm(Mn.entries - M.entries))
        deltas.append(d)
        M = Mn
        states.append(M)
        gen_errors.append(generalization_error(channel, M, cfg))
        iterations = t + 1
        consec = consec + 1 if d < cfg.tol else 0
        if consec >= 3:
            converged = True
            break
    fro = [float(np.linalg.norm(s.entries)) for s in states]
    segs = detect_plateaus(deltas, fro, 10.0 * cfg.tol, 1e-2)
    plateaus = [(s, e, states[e]) for s, e in segs]
    return SETrajectory(states=states, gen_errors=gen_errors,
                        converged=converged, fixed_point=M,
                        iterations=iterations, plateau_segments=plateaus)


def se_fixed_point_restricted(channel, U, alpha, cfg):
    """Fixed point with vanishing side information along U only.

    Runs the restricted map at lam in {1e-2, 1e-3, 1e-4}; once successive
    fixed points stabilize (Frobenius gap < 1e-2) a lam = 0 polish run is
    started from the last one. Returns a U-supported OverlapMatrix; all-zero
    when the conditioned overlap vanishes as lam -> 0.
    """
    U = np.asarray(U, float)
    if U.ndim == 1:
        U = U[:, None]
    p = channel.p
    P = U @ U.T
    prev = None
    fps = []
    for lam in (1e-2, 1e-3, 1e-4):
        c = SEConfig(alpha=alpha, lam=lam, damping=cfg.damping,
                     mc_samples=cfg.mc_samples, tol=cfg.tol,
                     max_iter=cfg.max_iter, seed=cfg.seed,
                     restrict_to=U, quad=cfg.quad)
        M0 = OverlapMatrix(prev.entries if prev is not None else lam * P)
        traj = se_run(channel, M0, c)
        prev = traj.fixed_point
        fps.append(prev)
    gaps = [float(np.linalg.norm(fps[i + 1].entries - fps[i].entries))
            for i in range(len(fps) - 1)]
    stabilized = gaps[-1] < 1e-2
    c0 = SEConfig(alpha=alpha, lam=0.0, damping=cfg.damping,
                  mc_samples=cfg.mc_samples, tol=cfg.tol,
                  max_iter=cfg.max_iter, seed=cfg.seed,
                  restrict_to=U, quad=cfg.quad)
    traj = se_run(channel, fps[-1], c0)
    M_final = traj.fixed_point
    collapsing = float(np.linalg.norm(M_final.entries)) \
        < 0.5 * float(np.linalg.norm(fps[-1].entries))
    if float(np.linalg.norm(M_final.entries)) < 0.02 \
            or (not stabilized and collapsing):
        return OverlapMatrix(np.zeros((p, p)))
    return M_final
