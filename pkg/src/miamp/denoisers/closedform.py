"""Closed-form and 1-D-quadrature denoisers.

Covers: linear links (any p, exact), sum-of-squares (chi-square shortcut at
isotropic inputs for any p, sphere quadrature for p = 2, 3), the p = 2
product link (log-substitution quadrature), and generic p = 1 polynomial
links by root enumeration.
"""

import numpy as np
from numpy.polynomial import polynomial as npoly

from ..errors import DegenerateLikelihood, DenoiserFailure
from ._common import assemble

_SQRT2PI = np.sqrt(2.0 * np.pi)


def _phi(x, var):
    return np.exp(-0.5 * x * x / var) / np.sqrt(2.0 * np.pi * var)


# ------------------------------------------------------------------ linear

def linear_eval(pack, y, omega, noise):
    """g(z) = sum_k z_k plus optional Gaussian noise: all-Gaussian algebra."""
    p = pack.p
    ones = np.ones(p)
    V1 = pack.V @ ones if not pack.batched else np.einsum('iab,b->ia', pack.V, ones)
    s2 = (ones @ V1 if not pack.batched else np.einsum('ia,a->i', V1, ones))
    s2 = s2 + noise ** 2
    r = y - omega @ ones
    z = _phi(r, s2)
    if pack.batched:
        m = omega + V1 * (r / s2)[:, None]
        cov = pack.V - np.einsum('ia,ib->iab', V1, V1) / s2[:, None, None]
    else:
        m = omega + np.outer(r / s2, V1)
        cov = pack.V[None] - np.outer(V1, V1)[None] / s2
    S = cov + np.einsum('ia,ib->iab', m, m)
    out = assemble(pack, omega, z, m, S)
    out["est_error"] = np.full(y.shape, 1e-14)
    return out


# ------------------------------------------------------------- sum-squares

def sumsq_isotropic(pack, y, omega, p):
    """Isotropic shortcut: posterior uniform on the radius-sqrt(p y) sphere."""
    from scipy.stats import chi2
    if np.any(y <= 0):
        bad = int(np.argmax(y <= 0))
        raise DegenerateLikelihood(
            f"sum-squares label y={y[bad]:.3g} <= 0 at sample {bad}")
    v = pack.V[0, 0]
    z = chi2.pdf(p * y / v, df=p) * (p / v)
    n = y.shape[0]
    m = np.zeros((n, p))
    S = y[:, None, None] * np.eye(p)[None]
    out = assemble(pack, omega, z, m, S)
    out["est_error"] = np.full(n, 1e-14)
    return out


def _sphere_nodes(p):
    if p == 2:
        K = 256
        th = 2.0 * np.pi * np.arange(K) / K
        xi = np.stack([np.cos(th), np.sin(th)], axis=1)
        w = np.full(K, 2.0 * np.pi / K)
        return xi, w
    # p == 3: Gauss-Legendre in cos(theta), trapezoid in phi
    u, wu = np.polynomial.legendre.leggauss(64)
    K_phi = 96
    ph = 2.0 * np.pi * np.arange(K_phi) / K_phi
    wp = 2.0 * np.pi / K_phi
    s = np.sqrt(np.maximum(0.0, 1.0 - u ** 2))
    xi = np.stack([np.outer(s, np.cos(ph)).ravel(),
                   np.outer(s, np.sin(ph)).ravel(),
                   np.repeat(u, K_phi)], axis=1)
    w = np.repeat(wu, K_phi) * wp
    return xi, w


def sumsq_sphere(pack, y, omega, p):
    """General (omega, V) posterior for y = |z|^2/p: sphere quadrature."""
    if np.any(y <= 0):
        bad = int(np.argmax(y <= 0))
        raise DegenerateLikelihood(
            f"sum-squares label y={y[bad]:.3g} <= 0 at sample {bad}")
    xi, w = _sphere_nodes(p)             # (K,p), (K,)
    r = np.sqrt(p * y)                   # (n,)
    n = y.shape[0]
    if pack.batched:
        ld = np.log(np.linalg.det(pack.V))
        Vinv = pack.inv
    else:
        ld = np.full(n, np.log(np.linalg.det(pack.V)))
        Vinv = np.broadcast_to(pack.inv, (n, p, p))
    Z = np.empty(n)
    m = np.empty((n, p))
    S = np.empty((n, p, p))
    chunk = max(1, 2_000_000 // xi.shape[0])
    for a in range(0, n, chunk):
        b = min(n, a + chunk)
        zpts = r[a:b, None, None] * xi[None]                  # (c,K,p)
        dz = zpts - omega[a:b, None, :]
        q = np.einsum('ika,iab,ikb->ik', dz, Vinv[a:b], dz)
        dens = np.exp(-0.5 * q - 0.5 * ld[a:b, None]) \
            / (2.0 * np.pi) ** (p / 2.0)
        wt = dens * w[None]                                   # (c,K)
        tot = wt.sum(axis=1)
        Z[a:b] = tot * r[a:b] ** (p - 1) * (p / (2.0 * r[a:b]))
        wn = wt / np.maximum(tot, 1e-300)[:, None]
        m[a:b] = r[a:b, None] * np.einsum('ik,ka->ia', wn, xi)
        S[a:b] = (r[a:b] ** 2)[:, None, None] \
            * np.einsum('ik,ka,kb->iab', wn, xi, xi)
    out = assemble(pack, omega, Z, m, S)
    out["est_error"] = np.full(n, 1e-8)
    return out


# ---------------------------------------------------------- product (p=2)

_U_NODES, _U_WEIGHTS = np.polynomial.legendre.leggauss(320)


def monomial2_eval(pack, y, omega):
    """y = z1 z2. Branch substitution z1 = s e^u kills the 1/|z1| Jacobian.

    The log-radius window is per-sample: mass needs |z1| within 9 sigma of
    omega_1 and |y|/|z1| within 9 sigma of omega_2, so u is integrated over
    [log|y| - log b2, log b1] plus a unit margin. A fixed window loses
    marginal mass once |y| drops below its exp(-width).
    """
    n = y.shape[0]
    if pack.batched:
        Vinv = pack.inv
        ld = np.log(np.linalg.det(pack.V))
        v11 = pack.V[:, 0, 0]
        v22 = pack.V[:, 1, 1]
    else:
        Vinv = np.broadcast_to(pack.inv, (n, 2, 2))
        ld = np.full(n, np.log(np.linalg.det(pack.V)))
        v11 = np.full(n, pack.V[0, 0])
        v22 = np.full(n, pack.V[1, 1])
    ys = np.where(np.abs(y) < 1e-12, 1e-12, y)   # density log-diverges at 0
    b1 = np.abs(omega[:, 0]) + 9.0 * np.sqrt(v11)
    b2 = np.abs(omega[:, 1]) + 9.0 * np.sqrt(v22)
    lo = np.log(np.abs(ys)) - np.log(b2) - 1.0
    hi = np.log(b1) + 1.0
    hi = np.maximum(hi, lo + 2.0)
    cen = 0.5 * (hi + lo)
    half = 0.5 * (hi - lo)
    u = cen[:, None] + half[:, None] * _U_NODES[None, :]      # (n,K)
    wu = half[:, None] * _U_WEIGHTS[None, :]
    eu = np.exp(u)
    Z = np.zeros(n)
    M1 = np.zeros((n, 2))
    M2 = np.zeros((n, 2, 2))
    for s in (1.0, -1.0):
        z1 = s * eu                                  # (n,K)
        z2 = ys[:, None] / z1
        zq = np.stack([z1, z2], axis=2)
        dz = zq - omega[:, None, :]
        q = np.einsum('ika,iab,ikb->ik', dz, Vinv, dz)
        dens = np.exp(-0.5 * q - 0.5 * ld[:, None]) / (2.0 * np.pi)
        wt = dens * wu
        Z += wt.sum(axis=1)
        M1 += np.einsum('ik,ika->ia', wt, zq)
        M2 += np.einsum('ik,ika,ikb->iab', wt, zq, zq)
    norm = np.maximum(Z, 1e-300)
    m = M1 / norm[:, None]
    S = M2 / norm[:, None, None]
    out = assemble(pack, omega, Z, m, S)
    out["est_error"] = np.full(n, 1e-9)
    return out


# ------------------------------------------------------------- p=1 roots

def _real_roots_batch(coefs, y):
    """Real roots of c(z) = y per sample. coefs ascending, shared."""
    c = np.array(coefs, float)
    deg = len(c) - 1
    n = y.shape[0]
    if deg == 1:
        return [(np.array([(yy - c[0]) / c[1]])) for yy in y]
    if deg == 2:
        a, b = c[2], c[1]
        disc = b * b - 4.0 * a * (c[0] - y)
        out = []
        for i in range(n):
            if disc[i] < 0:
                out.append(np.empty(0))
            else:
                sq = np.sqrt(disc[i])
                out.append(np.array([(-b - sq) / (2 * a), (-b + sq) / (2 * a)]))
        return out
    out = []
    for i in range(n):
        ci = c.copy()
        ci[0] -= y[i]
        r = npoly.polyroots(ci)
        out.append(np.real(r[np.abs(np.imag(r)) < 1e-9]))
    return out


def polyroots_eval(pack, y, omega, terms):
    """p = 1 deterministic polynomial link: sum over preimage roots."""
    coefs = np.zeros(max(e[0] for _, e in terms) + 1)
    for cc, ex in terms:
        coefs[ex[0]] += cc
    dcoefs = npoly.polyder(coefs)
    n = y.shape[0]
    v = pack.V[..., 0, 0] * np.ones(n)
    om = omega[:, 0]
    roots = _real_roots_batch(coefs, y)
    Z = np.zeros(n)
    m = np.zeros((n, 1))
    S = np.zeros((n, 1, 1))
    for i, r in enumerate(roots):
        if r.size == 0:
            raise DegenerateLikelihood(
                f"label y={y[i]:.6g} has no preimage under the link",)
        gp = np.abs(npoly.polyval(r, dcoefs))
        w = _phi(r - om[i], v[i]) / np.maximum(gp, 1e-12)
        Z[i] = w.sum()
        if Z[i] < 1e-300:
            raise DenoiserFailure(
                f"posterior weight underflow at y={y[i]:.6g}", sample_index=i)
        m[i, 0] = (w * r).sum() / Z[i]
        S[i, 0, 0] = (w * r * r).sum() / Z[i]
    out = assemble(pack, omega, Z, m, S)
    out["est_error"] = np.full(n, 1e-11)
    return out
