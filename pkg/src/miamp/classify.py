"""Direction classification and the sequential-learning ladder.

A direction is trivial when the posterior mean at zero overlap already
correlates with it (one algorithm step at any sample ratio), easy when the
linearized overlap operator makes it grow from vanishing side information
above a finite sample ratio, and hard otherwise. Conditioning on an
already-learned subspace U yields the coupled variants of both notions, and
iterating them gives the ladder of subspaces learnable in sequence.

Two scoring routes coexist for the easy set. The direction-wise quartic
score E[(v^T D(Y) v)^2] is the literal vanishing-diagonal criterion; the
operator route takes the range of the top cone eigenpair. Sign-pair
channels make every single direction score zero while the pair is
recovered jointly, so on disagreement the operator verdict is reported and
the conflict stays visible in the basis note (and as a warning) instead of
being resolved silently.
"""

import math
import warnings
from dataclasses import dataclass, replace

import numpy as np

from .errors import InvalidSpec, MiampError
from .rng import stream
from .se import (OverlapMatrix, SEConfig, se_fixed_point_restricted,
                 se_run)
from .stability import (build_stability_operator, cone_top_eigenpair,
                        top_sv_error, value_outer_zero)

_N_RESTARTS = 200
_GRAM_TOL = 1e-10
# MC budget inside the ladder bisection; the crossing only needs the top
# singular value to about a percent
_BISECT_MC = 12000


@dataclass(frozen=True)
class SubspaceBasis:
    """Orthonormal columns with the per-vector scores that justified
    membership and the tolerance they were tested against."""
    vectors: np.ndarray
    residuals: tuple
    tol: float
    note: str = ""

    def __post_init__(self):
        V = np.asarray(self.vectors, float)
        if V.ndim == 1:
            V = V[:, None]
        if V.ndim != 2:
            raise InvalidSpec(f"basis must be a matrix, got ndim={V.ndim}")
        object.__setattr__(self, "vectors", V)
        object.__setattr__(self, "residuals",
                           tuple(float(r) for r in self.residuals))
        k = V.shape[1]
        if k and np.max(np.abs(V.T @ V - np.eye(k))) > _GRAM_TOL:
            raise InvalidSpec("basis columns are not orthonormal")

    @property
    def dim(self):
        return self.vectors.shape[1]

    def projector(self):
        return self.vectors @ self.vectors.T

    def to_json(self):
        return {"vectors": [[float(x) for x in col]
                            for col in self.vectors.T],
                "residuals": list(self.residuals),
                "tol": float(self.tol),
                "note": self.note}


@dataclass(frozen=True)
class LadderLevel:
    basis: SubspaceBasis          # cumulative subspace after this level
    mechanisms: tuple             # one tag per direction added at this level
    alpha: float                  # recovery threshold for the level
    M_U: OverlapMatrix            # conditioning overlap used (zero at level 1)

    def to_json(self):
        return {"basis": self.basis.to_json(),
                "mechanisms": list(self.mechanisms),
                "alpha": float(self.alpha) if math.isfinite(self.alpha)
                else "inf",
                "M_U": [[float(x) for x in row] for row in self.M_U.entries]}


@dataclass(frozen=True)
class StaircaseLadder:
    levels: tuple
    terminal: SubspaceBasis
    learnable: bool
    complete: bool = True
    note: str = ""

    def to_json(self):
        return {"levels": [lv.to_json() for lv in self.levels],
                "terminal": self.terminal.to_json(),
                "learnable": bool(self.learnable),
                "complete": bool(self.complete),
                "note": self.note}


def _empty_basis(p, tol, note=""):
    return SubspaceBasis(np.zeros((p, 0)), (), tol, note)


def _span_union(groups, p, cut=0.05):
    """Greedy orthonormal span of the stacked column groups, keeping the
    incoming order; a vector joins only if its residual against the span so
    far exceeds cut (collected directions are unit vectors, so genuinely
    new ones come in with residual near 1)."""
    cols = []
    for g in groups:
        g = np.asarray(g, float)
        if g.size == 0:
            continue
        if g.ndim == 1:
            g = g[:, None]
        cols.extend(g.T)
    B = np.zeros((p, 0))
    for v in cols:
        r = v - B @ (B.T @ v)
        nr = np.linalg.norm(r)
        if nr > cut:
            B = np.column_stack([B, r / nr])
    return B


def _perp_basis(U, p):
    """Orthonormal basis of the orthogonal complement of span(U)."""
    if U.size == 0:
        return np.eye(p)
    q, _ = np.linalg.qr(np.column_stack([U, np.eye(p)]))
    return q[:, U.shape[1]:p]


def trivial_subspace(channel, cfg=None, tol=None):
    """Span of directions along which E[z | Y] is already nonzero at zero
    overlap, from the eigenvalues of C0 = E[g_out(Y,0,I)^{x2}].

    Each eigenvalue is tested against its own statistical error (the error
    of the quadratic form v^T C0 v across sample chunks), not the max-entry
    error, which is dominated by whichever direction fluctuates most.
    """
    cfg = cfg or SEConfig(alpha=1.0)
    p = channel.p
    C, err, chunk_means = value_outer_zero(channel, cfg)
    lam, Q = np.linalg.eigh(C)
    keep = []
    residuals = []
    tol_used = tol if tol is not None else max(1e-6, 5.0 * err)
    for i in range(p - 1, -1, -1):
        v = Q[:, i]
        if chunk_means is not None:
            forms = np.einsum('a,kab,b->k', v, chunk_means, v)
            e_i = float(np.std(forms) / math.sqrt(len(forms)))
        else:
            e_i = err
        t_i = tol if tol is not None else max(1e-6, 5.0 * e_i)
        if lam[i] > t_i:
            keep.append(v)
            residuals.append(float(lam[i]))
            if tol is None:
                tol_used = max(tol_used, t_i)
    vectors = np.column_stack(keep) if keep else np.zeros((p, 0))
    return SubspaceBasis(vectors, tuple(residuals), float(tol_used))


def _second_moment_square(op):
    """E[D(Y)^2] reconstructed from the svec second moment: for symmetric
    D = sum_q d_q B_q, E[D^2] = sum_qr K_qr B_q B_r."""
    Bas = op.coords.basis
    return np.einsum('qr,qac,rcb->ab', op.second_moment, Bas, Bas,
                     optimize=True)


def _quartic_score(op, v):
    u = op.coords.svec(np.outer(v, v))
    return float(u @ op.second_moment @ u)


def _minimize_quartic(op, v0, Pm, step0):
    """Projected gradient descent of s(v) = svec(vv^T)^T K svec(vv^T) on
    the unit sphere of range(Pm). The gradient is 4 unsvec(K svec(vv^T)) v."""
    coords = op.coords
    K = op.second_moment
    v = Pm @ np.asarray(v0, float)
    n = np.linalg.norm(v)
    if n < 1e-10:
        return None, math.inf
    v = v / n
    s = _quartic_score(op, v)
    eta = step0
    for _ in range(400):
        g = 4.0 * coords.unsvec(K @ coords.svec(np.outer(v, v))) @ v
        g = Pm @ g
        g = g - (g @ v) * v
        gn = np.linalg.norm(g)
        if gn < 1e-13 or eta < 1e-14:
            break
        w = v - eta * g
        w = Pm @ w
        nw = np.linalg.norm(w)
        if nw < 1e-10:
            break
        w = w / nw
        sw = _quartic_score(op, w)
        if sw < s - 1e-18:
            v, s = w, sw
            eta *= 1.2
        else:
            eta *= 0.5
    return v, s


def _feeding_closure(channel, cfg, S, base, tol):
    """Close the growing-mode range under second-order feeding.

    Once the directions in base and S carry overlap, any direction with a
    nonzero posterior-mean outer product at that conditioning picks up
    overlap immediately (no further instability needed), so it belongs to
    the same easy span. A rank-one growing mode like the symmetric mixture
    of a product channel closes to the full plane this way, while a sign
    pair hidden behind a learned square direction stays out because its
    posterior mean vanishes identically there.
    """
    p = channel.p
    ccfg = replace(cfg, mc_samples=min(cfg.mc_samples, _BISECT_MC))
    while S.shape[1]:
        B = _span_union([base, S], p)
        if B.shape[1] >= p:
            break
        M = 0.7 * (B @ B.T)
        op = build_stability_operator(channel, M, ccfg,
                                      check_fixed_point=False)
        Pm = np.eye(p) - B @ B.T
        C = Pm @ op.value_outer @ Pm
        lam, Q = np.linalg.eigh(C)
        cut = tol if tol is not None \
            else max(1e-6, 5.0 * op.value_outer_error)
        add = [Q[:, i] for i in range(p) if lam[i] > cut]
        if not add:
            break
        S = _span_union([S] + add, p)
    return S


def _easy_from_operator(channel, op, cfg, tol=None, candidates=None):
    """Easy span from an assembled operator, with the quartic direction
    scores as cross-check. Returns (basis, nu, quartic_span)."""
    p = channel.p
    ambient = np.eye(p) if op.restriction is None \
        else _perp_basis(op.restriction, p)
    Pm = ambient @ ambient.T
    tol_eff = tol if tol is not None else max(1e-6, 5.0 * op.mc_error)

    # candidate zero-score directions: axes, spectral directions of E[D^2],
    # anything user-supplied, then random-restart minimizers
    cand = [np.eye(p)[:, a] for a in range(p)]
    A = _second_moment_square(op)
    _, QA = np.linalg.eigh(0.5 * (A + A.T))
    cand.extend(QA.T)
    if candidates is not None:
        cand.extend(np.atleast_2d(np.asarray(candidates, float)))
    knorm = float(np.linalg.norm(op.second_moment, 2))
    step0 = 0.25 / (1.0 + 4.0 * knorm)
    for i in range(_N_RESTARTS):
        cand.append(stream(cfg.seed, "classify-restart", i).standard_normal(p))

    zeros = []
    for v0 in cand:
        v, s = _minimize_quartic(op, v0, Pm, step0)
        if v is not None and s <= tol_eff:
            zeros.append((s, v))
    zeros.sort(key=lambda t: t[0])
    H = _span_union([v for _, v in zeros], p)
    if H.shape[1] == 0:
        quartic_span = ambient
    else:
        # complement of the zero-score span inside the ambient subspace
        quartic_span = _perp_basis(
            _span_union([H, _perp_basis(ambient, p)], p), p)

    nu = float(np.linalg.norm(op.matrix, 2))
    nerr = top_sv_error(op)
    if nu < max(1e-8, 5.0 * nerr):
        # gate before the cone power iteration: on a pure-noise operator it
        # is meaningless and its PSD-residual check would cry wolf
        op_span = np.zeros((p, 0))
    else:
        nu, M_star = cone_top_eigenpair(op)
        w, Q = np.linalg.eigh(M_star.entries)
        # relative cut: noise eigenvalues scale with nerr/nu, and equal
        # weight full-rank extremizers (eigenvalues 1/sqrt(p)) must survive
        cut = w[-1] * max(1e-6, min(0.45, 10.0 * nerr / max(nu, 1e-30)))
        op_span = Q[:, w > cut]
        base = op.restriction if op.restriction is not None \
            else np.zeros((p, 0))
        op_span = _feeding_closure(channel, cfg, op_span, base, tol)

    note = ""
    Pq = quartic_span @ quartic_span.T
    Po = op_span @ op_span.T
    # the quartic minima are flat (quartic in the offset), so minimizers
    # resolve a zero direction only to ~(grad tol)^(1/3); compare spans
    # coarsely and dimensions exactly
    if quartic_span.shape[1] != op_span.shape[1] \
            or np.linalg.norm(Pq - Po) > 1e-2:
        note = ("direction-wise quartic scores and the operator spectrum "
                "disagree; reporting the operator verdict")
        warnings.warn(
            f"easy-subspace routes disagree for kind={channel.spec.kind!r} "
            f"(quartic dim {quartic_span.shape[1]}, operator dim "
            f"{op_span.shape[1]})", stacklevel=3)
    residuals = tuple(_quartic_score(op, op_span[:, j])
                      for j in range(op_span.shape[1]))
    basis = SubspaceBasis(op_span, residuals, float(tol_eff), note)
    return basis, nu, quartic_span


def easy_subspace(channel, cfg=None, tol=None, candidates=None):
    """Span of directions the linearized overlap operator can grow from
    vanishing side information. The reported span is the range of the top
    cone eigenpair; residuals are the quartic scores of its basis."""
    cfg = cfg or SEConfig(alpha=1.0)
    op = build_stability_operator(channel, None, cfg)
    basis, _, _ = _easy_from_operator(channel, op, cfg, tol, candidates)
    return basis


def _random_psd_probes(U, seed, count=3):
    """Random overlap matrices spanning span(U), eigenvalues in (0.4, 0.95),
    sampling the "any conditioning overlap spanning U" quantifier."""
    k = U.shape[1]
    probes = []
    for i in range(count):
        rng = stream(seed, "classify-probe", i)
        R = rng.standard_normal((k, k))
        Q, _ = np.linalg.qr(R)
        w = 0.4 + 0.55 * rng.random(k)
        probes.append(U @ (Q * w) @ Q.T @ U.T)
    return probes


def _outer_form_error(op, v):
    """Error of v^T value_outer v for one direction, from per-chunk means
    when the operator carries them. The max-entry spread can be orders of
    magnitude wider at strong conditioning, where a few entries of the
    value outer product fluctuate violently as the posterior variance
    collapses."""
    if op.value_outer_chunks is None:
        return op.value_outer_error
    forms = np.einsum('a,kab,b->k', v, op.value_outer_chunks, v)
    return float(np.std(forms) / math.sqrt(len(forms)))


def _coupled(channel, Ub, cfg, tol):
    """Worker for coupled_subspaces; also returns the restricted fixed
    point so the ladder can record the conditioning it actually used."""
    p = channel.p
    M_fp = se_fixed_point_restricted(channel, Ub, cfg.alpha, cfg)
    probes = []
    if float(np.linalg.norm(M_fp.entries)) > 1e-8:
        probes.append(M_fp.entries)
    probes.extend(_random_psd_probes(Ub, cfg.seed))

    Pm = np.eye(p) - Ub @ Ub.T
    ops = [build_stability_operator(channel, M, cfg, restriction=Ub,
                                    check_fixed_point=False)
           for M in probes]

    # trivially coupled: nonzero projected value outer product at any
    # probe, each eigenvalue tested against its own quadratic-form error
    # as in trivial_subspace
    t_vecs = []
    tol_t = tol
    for op in ops:
        Cp = Pm @ op.value_outer @ Pm
        lam, Q = np.linalg.eigh(Cp)
        base = tol if tol is not None \
            else max(1e-6, 5.0 * op.value_outer_error)
        tol_t = base if tol_t is None else max(tol_t, base)
        for i in range(p):
            v = Pm @ Q[:, i]
            cut = tol if tol is not None \
                else max(1e-6, 5.0 * _outer_form_error(op, v))
            if lam[i] > cut:
                t_vecs.append(Q[:, i])
    T_v = _span_union(t_vecs, p)
    t_res = tuple(
        max(float(T_v[:, j] @ (Pm @ op.value_outer @ Pm) @ T_v[:, j])
            for op in ops)
        for j in range(T_v.shape[1]))
    T_U = SubspaceBasis(T_v, t_res,
                        float(tol_t if tol_t is not None else 1e-6))

    # easily coupled: union of the operator verdicts across probes
    e_note = ""
    e_groups = []
    tol_e = tol
    for op in ops:
        eb, _, _ = _easy_from_operator(channel, op, cfg, tol)
        tol_e = eb.tol if tol_e is None else max(tol_e, eb.tol)
        if eb.note and not e_note:
            e_note = eb.note
        e_groups.append(eb.vectors)
    E_v = _span_union(e_groups, p)
    e_res = tuple(max(_quartic_score(op, E_v[:, j]) for op in ops)
                  for j in range(E_v.shape[1]))
    E_U = SubspaceBasis(E_v, e_res,
                        float(tol_e if tol_e is not None else 1e-6), e_note)
    return T_U, E_U, M_fp


def coupled_subspaces(channel, U, cfg=None, tol=None):
    """Trivially-coupled and easily-coupled spans orthogonal to U.

    The conditioning overlap is the restricted fixed point at cfg.alpha,
    supplemented by random overlap matrices spanning U, since the defining
    conditions quantify over every overlap spanning U and the fixed point
    alone samples one of them. A direction qualifies if it qualifies at any
    tested conditioning.
    """
    cfg = cfg or SEConfig(alpha=1.0)
    Ub = U.vectors if isinstance(U, SubspaceBasis) else np.asarray(U, float)
    if Ub.ndim == 1:
        Ub = Ub[:, None]
    if Ub.shape[1] == 0:
        return (trivial_subspace(channel, cfg, tol),
                easy_subspace(channel, cfg, tol))
    T_U, E_U, _ = _coupled(channel, Ub, cfg, tol)
    return T_U, E_U


def _level_threshold(channel, U, cfg, lo=1e-2, hi=1e2, iters=30):
    """Sample ratio at which the conditioned operator's top singular value
    crosses 1/alpha, by geometric bisection. The conditioning overlap is
    recomputed at every probe since it saturates with alpha."""
    bcfg = replace(cfg, mc_samples=min(cfg.mc_samples, _BISECT_MC))
    warm = [None]

    def fixed_point(alpha):
        c = replace(bcfg, alpha=alpha)
        if warm[0] is None \
                or float(np.linalg.norm(warm[0].entries)) < 0.02:
            M = se_fixed_point_restricted(channel, U, alpha, c)
        else:
            # successive probes change alpha by a bounded factor and the
            # conditioned overlap saturates, so converging from the last
            # fixed point replaces the full continuation ladder
            t1 = se_run(channel, warm[0],
                        replace(c, lam=1e-4, restrict_to=U))
            M = se_run(channel, t1.fixed_point,
                       replace(c, lam=0.0, restrict_to=U)).fixed_point
        warm[0] = M
        return M

    def excess(alpha):
        M = fixed_point(alpha)
        op = build_stability_operator(channel, M,
                                      replace(bcfg, alpha=alpha),
                                      restriction=U,
                                      check_fixed_point=False)
        return alpha * float(np.linalg.norm(op.matrix, 2)) - 1.0

    if excess(hi) < 0.0:
        return math.inf
    if excess(lo) > 0.0:
        return lo
    for _ in range(iters):
        mid = math.sqrt(lo * hi)
        if excess(mid) > 0.0:
            hi = mid
        else:
            lo = mid
        if hi / lo < 1.0 + 1e-3:
            break
    return math.sqrt(lo * hi)


def _lookup_scores(B, j0, bases):
    """Residual for each column of B from j0 on, looked up from whichever
    contributing basis the column mostly lives in."""
    out = []
    for j in range(j0, B.shape[1]):
        v = B[:, j]
        score = 0.0
        for basis in bases:
            if basis.dim and np.linalg.norm(basis.projector() @ v) > 0.99:
                k = int(np.argmax(np.abs(basis.vectors.T @ v)))
                if k < len(basis.residuals):
                    score = basis.residuals[k]
                break
        out.append(float(score))
    return out


def grand_staircase(channel, cfg=None, tol=None, trivial=None, easy=None):
    """Iterate trivial/easy classification conditioned on what is already
    learned until the subspace stops growing.

    trivial and easy accept precomputed level-1 bases so a report does not
    recompute them. A level whose conditioned analysis fails marks the
    ladder incomplete instead of guessing.
    """
    cfg = cfg or SEConfig(alpha=1.0)
    p = channel.p
    T = trivial if trivial is not None else trivial_subspace(channel, cfg,
                                                             tol)
    E = easy if easy is not None else easy_subspace(channel, cfg, tol)

    levels = []
    B = _span_union([T.vectors, E.vectors], p)
    if B.shape[1] > 0:
        mechs = []
        for j in range(B.shape[1]):
            v = B[:, j]
            inT = T.dim and np.linalg.norm(T.projector() @ v) > 0.99
            mechs.append("trivial" if inT else "easy")
        rep_alpha = _alpha_easy(channel, cfg) if "easy" in mechs else 0.0
        basis = SubspaceBasis(B, tuple(_lookup_scores(B, 0, (T, E))),
                              max(T.tol, E.tol))
        levels.append(LadderLevel(basis, tuple(mechs), rep_alpha,
                                  OverlapMatrix(np.zeros((p, p)))))

    complete = True
    note = ""
    while levels and levels[-1].basis.dim < p and len(levels) < p:
        U = levels[-1].basis
        try:
            T_U, E_U, M_fp = _coupled(channel, U.vectors, cfg, tol)
        except MiampError as exc:
            complete = False
            note = f"level {len(levels) + 1} aborted: {exc}"
            break
        grown = _span_union([U.vectors, T_U.vectors, E_U.vectors], p)
        if grown.shape[1] <= U.dim:
            break
        mechs = []
        for j in range(U.dim, grown.shape[1]):
            v = grown[:, j]
            inT = T_U.dim and np.linalg.norm(T_U.projector() @ v) > 0.99
            mechs.append("trivially-coupled" if inT else "easy-coupled")
        alpha_lv = _level_threshold(channel, U.vectors, cfg) \
            if "easy-coupled" in mechs else 0.0
        scores = list(U.residuals) + _lookup_scores(grown, U.dim,
                                                    (T_U, E_U))
        basis = SubspaceBasis(grown, tuple(scores), max(T_U.tol, E_U.tol))
        levels.append(LadderLevel(basis, tuple(mechs), float(alpha_lv),
                                  M_fp))

    terminal = levels[-1].basis if levels else _empty_basis(
        p, T.tol, "no learnable directions")
    return StaircaseLadder(tuple(levels), terminal,
                           learnable=terminal.dim == p,
                           complete=complete, note=note)


def _alpha_easy(channel, cfg):
    """Threshold 1/nu for the level-1 easy directions."""
    op = build_stability_operator(channel, None, cfg)
    nu = float(np.linalg.norm(op.matrix, 2))
    if nu < max(1e-8, 5.0 * top_sv_error(op)):
        return math.inf
    return 1.0 / nu


def classification_report(channel, cfg=None, tol=None):
    """Full JSON-ready classification: trivial and easy bases with scores,
    the ladder, and the tolerances used."""
    cfg = cfg or SEConfig(alpha=1.0)
    T = trivial_subspace(channel, cfg, tol)
    E = easy_subspace(channel, cfg, tol)
    ladder = grand_staircase(channel, cfg, tol, trivial=T, easy=E)
    return {
        "kind": channel.spec.kind,
        "p": channel.p,
        "trivial": T.to_json(),
        "easy": E.to_json(),
        "ladder": ladder.to_json(),
        "learnable": bool(ladder.learnable),
        "tolerances": {"trivial": T.tol, "easy": E.tol},
    }
