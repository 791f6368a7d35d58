"""Cone-spectral stability analysis of the zero-overlap fixed point.

The overlap map linearizes around a base point M_U as

    M  |->  (I + M_U)^{-1} E[ D M D^T ],      D = d g_out / d omega

evaluated on the effective process at the base point (omega = sqrt(M_U) xi,
V = I - M_U). The operator acts on symmetric p x p matrices, stored in an
orthonormal q = p(p+1)/2 coordinate system. Its top singular value nu gives
the critical sample ratio alpha_c = 1/nu; restricted to matrices supported
on the orthogonal complement of an already-learned subspace U it gives the
next-level threshold alpha_gst.

The label expectation is taken three ways depending on the channel: exact
weighted sum over the finite label set, panel quadrature in y with a t^6
endpoint substitution (integrable density singularities at branch points),
or Monte Carlo. At a nonzero base point the pair (xi, Y) is sampled jointly.
Assembly reduces over fixed-size chunks in a deterministic order, so
results are reproducible for a given seed.
"""

import math
import warnings
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
from numpy.polynomial import polynomial as npoly
from scipy.integrate import quad_vec

from .errors import (DegenerateLikelihood, InvalidSpec,
                     NonConvergentPowerIteration, QuadratureFailure)
from .denoisers import evaluate_batch
from .rng import stream
from .se import OverlapMatrix, SEConfig, sqrtm_psd

_MC_CHUNK = 1024
_POWER_CAP = 10_000


class SymMatrixCoords:
    """Orthonormal coordinates on symmetric p x p matrices.

    Basis: diagonal units E_aa (first p slots), then (E_ab + E_ba)/sqrt(2)
    for a < b in row-major pair order. Coordinates are an isometry between
    the Frobenius and Euclidean norms.
    """

    def __init__(self, p):
        if p < 1:
            raise InvalidSpec("p must be >= 1")
        self.p = p
        self.q = p * (p + 1) // 2
        basis = np.zeros((self.q, p, p))
        pairs = []
        for a in range(p):
            basis[a, a, a] = 1.0
            pairs.append((a, a))
        k = p
        inv_sqrt2 = 1.0 / np.sqrt(2.0)
        for a in range(p):
            for b in range(a + 1, p):
                basis[k, a, b] = inv_sqrt2
                basis[k, b, a] = inv_sqrt2
                pairs.append((a, b))
                k += 1
        self.basis = basis
        self.index_pairs = tuple(pairs)

    def svec(self, M):
        """Coordinates of (the symmetric part of) M; works on batches."""
        M = np.asarray(M, float)
        return np.einsum('qab,...ab->...q', self.basis, M)

    def unsvec(self, v):
        v = np.asarray(v, float)
        return np.einsum('...q,qab->...ab', v, self.basis)


@dataclass(frozen=True)
class LinearSymOperator:
    """The assembled q x q stability operator at a base point.

    matrix includes the (I + M_U)^{-1} prefactor and, when restriction is
    set, the projection of inputs and outputs onto symmetric matrices
    supported on the orthogonal complement of U. second_moment (the q x q
    matrix E[svec(D) svec(D)^T]) and value_outer (E[g g^T], debiased) are
    accumulated in the same pass for the direction classifier.
    """
    matrix: np.ndarray
    base_point: OverlapMatrix
    restriction: Optional[np.ndarray]
    mc_error: float
    coords: SymMatrixCoords
    second_moment: np.ndarray
    value_outer: np.ndarray
    # statistical error of value_outer alone; the operator entries have far
    # larger sampling noise and would drown the trivial-direction test
    value_outer_error: float = 0.0
    # per-chunk operator matrices (k, q, q) on the MC path, carrying the
    # same prefactor and restriction as matrix; they let consumers compute
    # the error of any bilinear form of the matrix, which is much sharper
    # than the max-entry spread when the noise concentrates in a few entries
    matrix_chunks: Optional[np.ndarray] = None
    # per-chunk value-outer means (k, p, p), same role for value_outer: the
    # error of v^T value_outer v along one direction v is often much smaller
    # than the worst entry's spread
    value_outer_chunks: Optional[np.ndarray] = None


@dataclass(frozen=True)
class StabilityReport:
    nu: float
    M_star: OverlapMatrix
    alpha_c: float
    per_direction: dict
    degenerate: bool
    mc_error: float
    tag: str = ""

    def to_json(self):
        ut = self.M_star.entries[np.triu_indices(self.M_star.p)]
        return {
            "nu": float(self.nu),
            "alpha_c": float(self.alpha_c) if math.isfinite(self.alpha_c)
            else "inf",
            "M_star": [float(v) for v in ut],
            "degenerate": bool(self.degenerate),
            "mc_error": float(self.mc_error),
            "tag": self.tag,
            "per_direction": {k: float(v)
                              for k, v in self.per_direction.items()},
        }


class ConeEigenpair(NamedTuple):
    nu: float
    M_star: OverlapMatrix


class _Accumulator:
    """Weighted sums of the operator action, svec outer product, and value
    outer product over batches of jacobian samples."""

    def __init__(self, coords):
        q, p = coords.q, coords.p
        self.coords = coords
        self.F = np.zeros((q, q))
        self.K = np.zeros((q, q))
        self.C = np.zeros((p, p))
        self.weight = 0.0
        self.est = 0.0
        self.est2 = 0.0

    def add(self, D, w, value=None, value_cov=None, cross=None,
            est_error=None):
        """cross, when given, is V^{-1}(z - omega) for the planted draw
        behind each sample; E[cross g^T] = E[g g^T] exactly, and the inner
        engine's estimation noise enters it linearly instead of as an
        added variance, so no value_cov debiasing is needed."""
        Bas = self.coords.basis
        for j in range(self.coords.q):
            A = np.einsum('n,nab,bc,ndc->ad', w, D, Bas[j], D,
                          optimize=True)
            self.F[:, j] += np.einsum('rad,ad->r', Bas, A)
        sd = self.coords.svec(D)
        self.K += np.einsum('n,nq,nr->qr', w, sd, sd)
        if cross is not None and value is not None:
            X = np.einsum('n,na,nb->ab', w, cross, value)
            self.C += 0.5 * (X + X.T)
        elif value is not None:
            self.C += np.einsum('n,na,nb->ab', w, value, value)
            if value_cov is not None:
                self.C -= np.einsum('n,nab->ab', w, value_cov)
        self.weight += float(w.sum())
        if est_error is not None:
            self.est += float(w @ est_error)
            self.est2 += float(np.sum((w * est_error) ** 2))

    def normalized(self):
        w = self.weight
        if w <= 0:
            raise QuadratureFailure("label expectation accumulated no mass")
        return self.F / w, self.K / w, self.C / w, self.est / w

    def mean_inner_error(self):
        """Inner-engine noise of the weighted mean. Per-sample est_error is
        an independent-draw std, so it averages down quadratically; the
        linear est is the right bound only for deterministic engine
        tolerances."""
        if self.weight <= 0:
            return 0.0
        return math.sqrt(self.est2) / self.weight


def _eval_jac(channel, y, omega, V, cfg):
    # Ask for moments rather than the jacobian directly: the closed-form
    # engines return their exact jacobians either way, while the smoothed
    # backend then assembles V^{-1} Cov V^{-1} - V^{-1} from the sampled
    # second moment. Its pathwise estimator scores with residual/tau^2 and
    # has catastrophic tails for wide-output links (the operator squares
    # the jacobian, so those tails dominate); the covariance route is
    # bounded by the draw cloud.
    return evaluate_batch(channel, y, omega, V, cfg.quad, seed=cfg.seed,
                          need=("value", "moments", "value_cov"))


def _poly_terms_1d(channel):
    """Coefficient vector of a single-index polynomial link, or None."""
    kind = channel.spec.kind
    if channel.p != 1 or channel.noise > 0.0:
        return None
    if kind == "poly":
        terms = channel.spec.terms
    elif kind == "sum-squares":
        terms = ((1.0, (2,)),)
    elif kind in ("monomial", "linear"):
        terms = ((1.0, (1,)),)
    else:
        return None
    deg = max(ex[0] for _, ex in terms)
    c = np.zeros(deg + 1)
    for coef, ex in terms:
        c[ex[0]] += coef
    return c


def _panels_t6(f, breakpoints, epsabs, epsrel):
    """Integrate vector-valued f over consecutive panels, substituting
    y = a + t^6 (resp. b - t^6) from each endpoint to the midpoint so
    integrable endpoint singularities of the label density are lifted."""
    total = None
    err = 0.0
    for a, b in zip(breakpoints[:-1], breakpoints[1:]):
        mid = 0.5 * (a + b)
        for lo, sgn in ((a, 1.0), (b, -1.0)):
            span = abs(mid - lo)
            if span <= 0:
                continue
            g = lambda t: f(lo + sgn * t ** 6) * (6.0 * t ** 5)
            val, e = quad_vec(g, 0.0, span ** (1.0 / 6.0),
                              epsabs=epsabs, epsrel=epsrel)
            total = val if total is None else total + val
            err += e
    return total, err


def _single_index_nu(channel, cfg):
    """Independent quadrature of the single-index threshold functional
    E_Y[(Var(z|Y) - 1)^2], using root sums of the polynomial link rather
    than the denoiser engines. Returns (nu, est_error) or None when the
    link is not a noiseless single-index polynomial."""
    c = _poly_terms_1d(channel)
    if c is None:
        return None
    Lam = cfg.quad.cutoff
    dc = npoly.polyder(c)

    def roots_in_window(coeffs):
        rs = npoly.polyroots(coeffs)
        out = [float(r.real) for r in np.atleast_1d(rs)
               if abs(r.imag) < 1e-9 and abs(r.real) <= Lam + 1e-9]
        return out

    crit_vals = [float(npoly.polyval(z, c)) for z in roots_in_window(dc)]
    ends = [float(npoly.polyval(-Lam, c)), float(npoly.polyval(Lam, c))]
    lo = min(crit_vals + ends)
    hi = max(crit_vals + ends)
    interior = sorted(v for v in set(crit_vals) if lo < v < hi)
    breakpoints = [lo] + interior + [hi]

    def f(y):
        cy = c.copy()
        cy[0] -= y
        den = m1 = m2 = 0.0
        for z in roots_in_window(cy):
            gp = abs(float(npoly.polyval(z, dc)))
            if gp < 1e-300:
                continue
            w = math.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi) / gp
            den += w
            m1 += w * z
            m2 += w * z * z
        if den <= 0.0:
            return np.zeros(2)
        m1 /= den
        m2 /= den
        d = m2 - m1 * m1 - 1.0
        return np.array([den * d * d, den])

    vals, err = _panels_t6(f, breakpoints, cfg.quad.abs_tol,
                           cfg.quad.rel_tol)
    nu, mass = float(vals[0]), float(vals[1])
    if abs(mass - 1.0) > 1e-4:
        raise QuadratureFailure(
            f"single-index label density integrates to {mass:.6f}, not 1")
    return nu, err


def _y_breakpoints(channel, Lam):
    """Panel boundaries for the label quadrature at base point zero,
    covering the image of the |z_i| <= Lam box and marking integrable
    density singularities (branch points of the link)."""
    kind = channel.spec.kind
    p = channel.p
    noise = channel.noise
    if kind == "linear":
        s = math.sqrt(p + noise ** 2)
        return [-Lam * s, 0.0, Lam * s]
    if kind == "monomial":
        return [-Lam ** 2, 0.0, Lam ** 2]
    if kind == "sum-squares":
        return [0.0, min(2.0, Lam ** 2 / 2.0), Lam ** 2]
    if kind == "square-plus-parity":
        return [-1.0, 1.0, min(9.0, Lam ** 2), Lam ** 2 + 1.0]
    if kind == "poly" and p == 1:
        c = _poly_terms_1d(channel)
        dc = npoly.polyder(c)
        rs = npoly.polyroots(dc)
        zs = [float(r.real) for r in np.atleast_1d(rs)
              if abs(r.imag) < 1e-9 and abs(r.real) <= Lam]
        vals = [float(npoly.polyval(z, c)) for z in zs]
        ends = [float(npoly.polyval(-Lam, c)), float(npoly.polyval(Lam, c))]
        lo, hi = min(vals + ends), max(vals + ends)
        interior = sorted(v for v in set(vals) if lo < v < hi)
        return [lo] + interior + [hi]
    raise QuadratureFailure(
        f"no quadrature window defined for link kind {kind!r}")


def _assemble_quadrature(channel, cfg, coords):
    p = channel.p
    q = coords.q
    eye = np.eye(p)
    zero = np.zeros((1, p))

    nout = 2 * q * q + p * p + 1

    def f(y):
        try:
            out = _eval_jac(channel, np.array([y]), zero, eye, cfg)
        except DegenerateLikelihood:
            # boundary of the label support: zero density, zero contribution
            return np.zeros(nout)
        zo = float(out["z_out"][0])
        D = out["jacobian"][0]
        v = out["value"][0]
        acts = np.empty((q, q))
        for j in range(q):
            A = D @ coords.basis[j] @ D.T
            acts[:, j] = coords.svec(A)
        sd = coords.svec(D)
        vc = np.outer(v, v)
        if out["value_cov"] is not None:
            vc = vc - out["value_cov"][0]
        return zo * np.concatenate(
            [acts.ravel(), np.outer(sd, sd).ravel(), vc.ravel(), [1.0]])

    breakpoints = _y_breakpoints(channel, cfg.quad.cutoff)
    vals, err = _panels_t6(f, breakpoints, cfg.quad.abs_tol,
                           cfg.quad.rel_tol)
    nF = q * q
    F = vals[:nF].reshape(q, q)
    K = vals[nF:2 * nF].reshape(q, q)
    C = vals[2 * nF:2 * nF + p * p].reshape(p, p)
    mass = float(vals[-1])
    if abs(mass - 1.0) > 1e-4:
        raise QuadratureFailure(
            f"label density integrates to {mass:.6f}, not 1")
    return F / mass, K / mass, C / mass, float(err)


def _assemble_discrete_zero(channel, cfg, coords):
    p = channel.p
    ys = np.asarray(channel.output_values, float)
    omega = np.zeros((len(ys), p))
    out = _eval_jac(channel, ys, omega, np.eye(p), cfg)
    acc = _Accumulator(coords)
    acc.add(out["jacobian"], out["z_out"], value=out["value"],
            value_cov=out["value_cov"], est_error=out["est_error"])
    F, K, C, est = acc.normalized()
    if abs(acc.weight - 1.0) > 1e-6:
        raise QuadratureFailure(
            f"label masses sum to {acc.weight:.8f}, not 1")
    return F, K, C, est


def _assemble_mc(channel, M_U, cfg, coords):
    p = channel.p
    sqM = sqrtm_psd(M_U)
    Vsq = sqrtm_psd(np.eye(p) - M_U)
    V = np.eye(p) - M_U
    discrete = channel.output_values is not None
    ys_discrete = np.asarray(channel.output_values, float) if discrete \
        else None
    total = int(cfg.mc_samples)
    acc = _Accumulator(coords)
    chunk_fs = []
    chunk_cs = []
    ci = 0
    pos = 0
    while pos < total:
        take = min(_MC_CHUNK, total - pos)
        xi = stream(cfg.seed, "stability-xi", ci).standard_normal((take, p))
        omega = xi @ sqM.T
        before = acc.F.copy()
        cbefore = acc.C.copy()
        wbefore = acc.weight
        if discrete:
            ny = len(ys_discrete)
            ys = np.tile(ys_discrete, take)
            om = np.repeat(omega, ny, axis=0)
            out = _eval_jac(channel, ys, om, V, cfg)
            w = out["z_out"] / take
            acc.add(out["jacobian"], w, value=out["value"],
                    value_cov=out["value_cov"], est_error=out["est_error"])
        else:
            z = stream(cfg.seed, "stability-z", ci).standard_normal((take, p))
            zfull = omega + z @ Vsq.T
            rng_noise = stream(cfg.seed, "stability-noise", ci)
            ys = channel.evaluate(zfull, rng_noise)
            out = _eval_jac(channel, ys, omega, V, cfg)
            w = np.full(take, 1.0 / take)
            zeta = np.linalg.solve(V, (zfull - omega).T).T
            acc.add(out["jacobian"], w, value=out["value"], cross=zeta,
                    est_error=out["est_error"])
        dw = acc.weight - wbefore
        if dw > 0:
            chunk_fs.append((acc.F - before) / dw)
            chunk_cs.append((acc.C - cbefore) / dw)
        pos += take
        ci += 1
    F, K, C, _ = acc.normalized()
    inner = acc.mean_inner_error()
    # C rides on the planted-cross (or an exact engine), so inner noise is
    # already part of the sample scatter; adding it again would double
    # count. F squares the engine jacobian, whose inner noise is partially
    # common across chunks, so it keeps the conservative sum.
    c_est = inner
    spread = 0.0
    fstack = None
    cstack = None
    if len(chunk_fs) > 1:
        fstack = np.stack(chunk_fs)
        cstack = np.stack(chunk_cs)
        spread = float(np.std(fstack, axis=0).max()
                       / math.sqrt(len(chunk_fs)))
        c_est = float(np.std(cstack, axis=0).max()
                      / math.sqrt(len(chunk_cs)))
    return F, K, C, inner + spread, c_est, fstack, cstack


def _restriction_projector(U, coords):
    p = coords.p
    U = np.atleast_2d(np.asarray(U, float))
    if U.shape[0] != p:
        U = U.T
    if U.shape[0] != p or U.shape[1] > p:
        raise InvalidSpec(f"restriction has shape {U.shape}, expected "
                          f"({p}, k)")
    G = U.T @ U
    if np.max(np.abs(G - np.eye(U.shape[1]))) > 1e-8:
        raise InvalidSpec("restriction columns must be orthonormal")
    Pm = np.eye(p) - U @ U.T
    R = np.empty((coords.q, coords.q))
    for j in range(coords.q):
        R[:, j] = coords.svec(Pm @ coords.basis[j] @ Pm)
    return R, Pm


def _check_fixed_point(channel, M_U, cfg, restriction):
    """Warn when M_U drifts under one overlap-map step. The step is
    confined to the learned subspace when a restriction is given, since
    drift off it is exactly what the operator is built to measure."""
    from . import se
    probe = SEConfig(alpha=cfg.alpha, lam=cfg.lam,
                     mc_samples=min(cfg.mc_samples, 4000), seed=cfg.seed,
                     restrict_to=restriction, quad=cfg.quad)
    info = se._se_update_info(channel, OverlapMatrix(M_U), probe)
    drift = float(np.linalg.norm(info[0].entries - M_U, ord='fro'))
    tol = max(0.05, 20.0 * info[1]["mc_error"])
    if drift > tol:
        warnings.warn(
            f"base point is not an approximate fixed point of the overlap "
            f"map at alpha={cfg.alpha:g} (drift {drift:.3g})",
            stacklevel=3)


def build_stability_operator(channel, M_U=None, cfg=None, restriction=None,
                             check_fixed_point=True):
    """Assemble the linearized overlap operator at base point M_U.

    Returns a LinearSymOperator whose q x q matrix includes the
    (I + M_U)^{-1} prefactor and the optional restriction projector.
    """
    cfg = cfg or SEConfig(alpha=1.0)
    p = channel.p
    coords = SymMatrixCoords(p)
    if M_U is None:
        M_U = np.zeros((p, p))
    elif isinstance(M_U, OverlapMatrix):
        M_U = M_U.entries
    else:
        M_U = OverlapMatrix(M_U).entries
    at_zero = float(np.max(np.abs(M_U))) < 1e-14

    if not at_zero and check_fixed_point:
        rcols = None
        if restriction is not None:
            rcols = np.atleast_2d(np.asarray(restriction, float))
            if rcols.shape[0] != p:
                rcols = rcols.T
        _check_fixed_point(channel, M_U, cfg, rcols)

    fchunks = None
    cchunks = None
    if at_zero and channel.output_values is not None:
        F, K, C, est = _assemble_discrete_zero(channel, cfg, coords)
        c_est = est
    elif at_zero and channel.backend == "analytic":
        F, K, C, est = _assemble_quadrature(channel, cfg, coords)
        c_est = est
    else:
        F, K, C, est, c_est, fchunks, cchunks = _assemble_mc(channel, M_U,
                                                             cfg, coords)

    pref = np.linalg.inv(np.eye(p) + M_U)
    R = None
    if restriction is not None:
        R, _ = _restriction_projector(restriction, coords)

    def transform(Fm):
        Gm = np.empty_like(Fm)
        for j in range(coords.q):
            Gm[:, j] = coords.svec(pref @ coords.unsvec(Fm[:, j]))
        return R @ Gm @ R if R is not None else Gm

    G = transform(F)
    gchunks = None
    if fchunks is not None:
        gchunks = np.stack([transform(Fk) for Fk in fchunks])
    Rproj = None
    if restriction is not None:
        restriction = np.atleast_2d(np.asarray(restriction, float))
        if restriction.shape[0] != p:
            restriction = restriction.T
        Rproj = restriction
    return LinearSymOperator(matrix=G, base_point=OverlapMatrix(M_U),
                             restriction=Rproj, mc_error=float(est),
                             coords=coords, second_moment=K, value_outer=C,
                             value_outer_error=float(c_est),
                             matrix_chunks=gchunks,
                             value_outer_chunks=cchunks)


def cone_top_eigenpair(op):
    """Top singular value of the operator and the PSD extremizer reached
    by power iteration from I/sqrt(p)."""
    coords = op.coords
    p = coords.p
    s = np.linalg.svd(op.matrix, compute_uv=False)
    nu = float(s[0])
    if nu < 1e-30:
        return ConeEigenpair(0.0, OverlapMatrix(np.zeros((p, p))))
    M = np.eye(p) / math.sqrt(p)
    if op.restriction is not None:
        Pm = np.eye(p) - op.restriction @ op.restriction.T
        M = Pm @ M @ Pm
        nrm = np.linalg.norm(M, ord='fro')
        if nrm < 1e-30:
            return ConeEigenpair(0.0, OverlapMatrix(np.zeros((p, p))))
        M = M / nrm
    resid = 0.0
    for it in range(_POWER_CAP):
        raw = coords.unsvec(op.matrix @ coords.svec(M))
        raw = 0.5 * (raw + raw.T)
        nrm = np.linalg.norm(raw, ord='fro')
        if nrm < 1e-30:
            return ConeEigenpair(nu, OverlapMatrix(np.zeros((p, p))))
        raw = raw / nrm
        w, Q = np.linalg.eigh(raw)
        Mp = (Q * np.maximum(w, 0.0)) @ Q.T
        np_ = np.linalg.norm(Mp, ord='fro')
        if np_ < 1e-30:
            return ConeEigenpair(nu, OverlapMatrix(np.zeros((p, p))))
        resid = float(np.linalg.norm(Mp - raw, ord='fro'))
        Mp = Mp / np_
        if np.linalg.norm(Mp - M, ord='fro') < 1e-12:
            M = Mp
            break
        M = Mp
    else:
        raise NonConvergentPowerIteration(
            f"power iteration did not settle in {_POWER_CAP} steps")
    if resid > max(10.0 * op.mc_error, 1e-9):
        warnings.warn(f"PSD projection residual {resid:.3g} exceeds "
                      f"10x the operator noise estimate", stacklevel=2)
    return ConeEigenpair(nu, OverlapMatrix(M))


def _zero_threshold(op):
    return max(1e-8, 5.0 * op.mc_error)


def top_sv_error(op):
    """Statistical error of the operator's top singular value.

    The max-entry spread (mc_error) badly overstates it away from the zero
    base point, where a few near-singular entries fluctuate hard; the
    error of the bilinear form at the top singular vectors is the quantity
    the spectral gates actually need. Falls back to mc_error on the exact
    assembly paths, which carry no chunk decomposition.
    """
    if op.matrix_chunks is None:
        return op.mc_error
    u, _, vt = np.linalg.svd(op.matrix)
    forms = np.einsum('a,kab,b->k', u[:, 0], op.matrix_chunks, vt[0])
    return float(np.std(forms) / math.sqrt(len(forms)))


def alpha_critical(channel, cfg=None):
    """Critical sample ratio of the zero fixed point, with the trivial
    gate, degeneracy flag, and (for single-index polynomial links) an
    independent quadrature cross-check of nu."""
    cfg = cfg or SEConfig(alpha=1.0)
    op = build_stability_operator(channel, None, cfg)
    nu, M_star = cone_top_eigenpair(op)
    s = np.linalg.svd(op.matrix, compute_uv=False)
    degenerate = bool(len(s) > 1 and s[0] - s[1] < 1e-6)
    per_direction = {}
    for a in range(channel.p):
        per_direction[f"e{a + 1}"] = float(op.second_moment[a, a])

    triv_tol = max(1e-6, 5.0 * op.value_outer_error)
    trivial = bool(np.linalg.eigvalsh(op.value_outer).max() > triv_tol)

    dual = None
    if channel.p == 1:
        dual = _single_index_nu(channel, cfg)
    if dual is not None:
        nu_quad, err_quad = dual
        tol = max(1e-6, 10.0 * (err_quad + op.mc_error))
        if abs(nu - nu_quad) > tol * max(1.0, nu):
            raise QuadratureFailure(
                f"single-index routes disagree: operator nu={nu:.9f}, "
                f"direct quadrature nu={nu_quad:.9f}")

    if trivial:
        alpha_c = 0.0
        tag = "trivial"
    elif nu < _zero_threshold(op):
        alpha_c = math.inf
        tag = "hard"
    else:
        alpha_c = 1.0 / nu
        tag = "easy"
    return StabilityReport(nu=nu, M_star=M_star, alpha_c=alpha_c,
                           per_direction=per_direction,
                           degenerate=degenerate, mc_error=op.mc_error,
                           tag=tag)


def alpha_gst(channel, M_U, U, cfg=None, check_fixed_point=True):
    """Threshold for growth orthogonal to an already-learned subspace U
    at the conditioned base point M_U. Infinite when U is everything or
    the restricted operator vanishes."""
    cfg = cfg or SEConfig(alpha=1.0)
    p = channel.p
    U = np.atleast_2d(np.asarray(U, float))
    if U.shape[0] != p:
        U = U.T
    if U.shape[1] >= p:
        return math.inf
    op = build_stability_operator(channel, M_U, cfg, restriction=U,
                                  check_fixed_point=check_fixed_point)
    nu, _ = cone_top_eigenpair(op)
    if nu < _zero_threshold(op):
        return math.inf
    return 1.0 / nu


def value_outer_zero(channel, cfg=None):
    """E[g g^T] at the zero base point: (matrix, error, chunk means).

    The direction classifier resolves individual eigenvalues of this
    matrix, which takes a larger sample budget than the operator assembly;
    for MC-backed channels this pass requests values only, so it is much
    cheaper per sample than build_stability_operator. chunk_means (k, p, p)
    lets the caller compute the error of any quadratic form v^T C v
    directly, which is much sharper than the max-entry error when the
    variance is concentrated in a few entries; it is None on the exact
    paths.
    """
    cfg = cfg or SEConfig(alpha=1.0)
    p = channel.p
    if channel.output_values is not None or channel.backend == "analytic":
        op = build_stability_operator(channel, None, cfg,
                                      check_fixed_point=False)
        return op.value_outer, op.value_outer_error, None
    total = int(cfg.mc_samples)
    Csum = np.zeros((p, p))
    chunks = []
    ci = 0
    pos = 0
    while pos < total:
        take = min(_MC_CHUNK, total - pos)
        z = stream(cfg.seed, "stability-z", ci).standard_normal((take, p))
        rng_noise = stream(cfg.seed, "stability-noise", ci)
        ys = channel.evaluate(z, rng_noise)
        out = evaluate_batch(channel, ys, np.zeros((take, p)), np.eye(p),
                             cfg.quad, seed=cfg.seed, need=("value",))
        X = z.T @ out["value"]
        Xs = 0.5 * (X + X.T)
        Csum += Xs
        chunks.append(Xs / take)
        pos += take
        ci += 1
    C = Csum / total
    err = 0.0
    chunk_means = None
    if len(chunks) > 1:
        chunk_means = np.stack(chunks)
        err = float(np.std(chunk_means, axis=0).max()
                    / math.sqrt(len(chunks)))
    return C, err, chunk_means
