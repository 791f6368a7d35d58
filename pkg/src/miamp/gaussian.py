"""Gaussian orthant probabilities and truncated moments.

For x ~ N(mu, Sigma) with batch mu (B, m) and Sigma either shared (m, m)
or per-sample (B, m, m):

  bvnu               P(X > h, Y > k) for the standard bivariate normal
  orthant_q          P(x > 0)
  orthant_grad       d/dmu P(x > 0)
  orthant_hess       d^2/dmu^2 P(x > 0)
  truncated_moments  (Q, E[x 1_{x>0}], E[x x^T 1_{x>0}])

Dimensions m = 1..4. dim 1 is Phi, dim 2 the Genz bivariate routine, and
dim >= 3 reduces by Gauss-Legendre conditioning on the last coordinate.
The diagonal of the Hessian comes from the boundary identity
  H_kk = -(mu_k / S_kk) G_k - sum_{l != k} (S_lk / S_kk) H_kl,
so no integrals beyond the off-diagonal terms are needed.
"""

import numpy as np
from scipy.special import ndtr

_SQRT2PI = np.sqrt(2.0 * np.pi)

# Gauss-Legendre tables used by the Genz bivariate routine.
_GL6_X = np.array([0.9324695142031522, 0.6612093864662647, 0.2386191860831970])
_GL6_W = np.array([0.1713244923791705, 0.3607615730481384, 0.4679139345726904])
_GL12_X = np.array([0.9815606342467191, 0.9041172563704750, 0.7699026741943050,
                    0.5873179542866171, 0.3678314989981802, 0.1252334085114692])
_GL12_W = np.array([0.04717533638651177, 0.1069393259953183, 0.1600783285433464,
                    0.2031674267230659, 0.2334925365383547, 0.2491470458134029])
_GL20_X = np.array([0.9931285991850949, 0.9639719272779138, 0.9122344282513259,
                    0.8391169718222188, 0.7463319064601508, 0.6360536807265150,
                    0.5108670019508271, 0.3737060887154196, 0.2277858511416451,
                    0.07652652113349733])
_GL20_W = np.array([0.01761400713915212, 0.04060142980038694, 0.06267204833410906,
                    0.08327674157670475, 0.1019301198172404, 0.1181945319615184,
                    0.1316886384491766, 0.1420961093183821, 0.1491729864726037,
                    0.1527533871307259])


def bvnu(dh, dk, r):
    """P(X > dh, Y > dk) for standard bivariate normal with correlation r.

    Vectorized port of Genz's BVND; dh, dk, r broadcast together.
    """
    dh, dk, r = np.broadcast_arrays(np.asarray(dh, float), np.asarray(dk, float),
                                    np.asarray(r, float))
    shape = dh.shape
    h = dh.ravel().copy()
    k = dk.ravel().copy()
    r = r.ravel().copy()
    out = np.zeros(h.shape)

    tp = 2.0 * np.pi
    absr = np.abs(r)

    # |r| < 0.925: quadrature in asin(r)
    m1 = absr < 0.925
    if np.any(m1):
        h1, k1, r1 = h[m1], k[m1], r[m1]
        hk = h1 * k1
        hs = 0.5 * (h1 * h1 + k1 * k1)
        asr = np.arcsin(r1)
        bvn = np.zeros(h1.shape)
        for nx, nw, sel in ((_GL6_X, _GL6_W, np.abs(r1) < 0.3),
                            (_GL12_X, _GL12_W, (np.abs(r1) >= 0.3) & (np.abs(r1) < 0.75)),
                            (_GL20_X, _GL20_W, np.abs(r1) >= 0.75)):
            if not np.any(sel):
                continue
            a_ = asr[sel]
            hk_, hs_ = hk[sel], hs[sel]
            acc = np.zeros(a_.shape)
            for xi, wi in zip(nx, nw):
                for sgn in (-1.0, 1.0):
                    sn = np.sin(a_ * (sgn * xi + 1.0) / 2.0)
                    acc += wi * np.exp((sn * hk_ - hs_) / (1.0 - sn * sn))
            bvn[sel] = acc * a_ / (2.0 * tp)
        bvn += ndtr(-h1) * ndtr(-k1)
        out[m1] = bvn

    # |r| >= 0.925: Genz tail formula
    m2 = ~m1
    if np.any(m2):
        h2 = h[m2].copy()
        k2 = k[m2].copy()
        r2 = r[m2]
        neg = r2 < 0
        k2[neg] = -k2[neg]
        hk = h2 * k2
        bvn = np.zeros(h2.shape)

        lt1 = np.abs(r2) < 1.0
        if np.any(lt1):
            hl, kl, hkl = h2[lt1], k2[lt1], hk[lt1]
            as_ = (1.0 - r2[lt1]) * (1.0 + r2[lt1])
            a = np.sqrt(as_)
            bs = (hl - kl) ** 2
            c = (4.0 - hkl) / 8.0
            d = (12.0 - hkl) / 16.0
            asr = -(bs / as_ + hkl) / 2.0
            b1 = np.zeros(hl.shape)
            ok = asr > -100.0
            b1[ok] = (a * np.exp(asr) * (1.0 - c * (bs - as_) * (1.0 - d * bs / 5.0) / 3.0
                                         + c * d * as_ * as_ / 5.0))[ok]
            ok2 = -hkl < 100.0
            if np.any(ok2):
                b = np.sqrt(bs)
                sp = _SQRT2PI * ndtr(-b / a)
                corr = np.exp(-hkl / 2.0) * sp * b * (1.0 - c * bs * (1.0 - d * bs / 5.0) / 3.0)
                b1[ok2] -= corr[ok2]
            a2 = a / 2.0
            for xi, wi in zip(_GL20_X, _GL20_W):
                for sgn in (-1.0, 1.0):
                    xs = (a2 * (sgn * xi + 1.0)) ** 2
                    rs = np.sqrt(1.0 - xs)
                    asr1 = -(bs / xs + hkl) / 2.0
                    okq = asr1 > -100.0
                    sp1 = 1.0 + c * xs * (1.0 + d * xs)
                    ep = np.exp(-hkl * (1.0 - rs) / (2.0 * (1.0 + rs))) / rs
                    add = a2 * wi * np.exp(asr1) * (ep - sp1)
                    b1[okq] += add[okq]
            bvn[lt1] = -b1 / tp

        pos = r2 > 0
        bvn[pos] += ndtr(-np.maximum(h2, k2))[pos]
        negm = ~pos
        if np.any(negm):
            bvn[negm] = np.maximum(0.0, ndtr(-h2[negm]) - ndtr(-k2[negm])) - bvn[negm]
        out[m2] = bvn

    return np.clip(out.reshape(shape), 0.0, 1.0)


_COND_NODES = 48
_COND_X, _COND_W = np.polynomial.legendre.leggauss(_COND_NODES)
_TAIL = 8.5


def _entry(Sigma, i, j):
    return Sigma[..., i, j]


def orthant_q(mu, Sigma):
    """P(x > 0) for x ~ N(mu, Sigma); mu (B, m), Sigma (m, m) or (B, m, m)."""
    mu = np.atleast_2d(np.asarray(mu, float))
    Sigma = np.asarray(Sigma, float)
    B, m = mu.shape
    if m == 1:
        s = np.sqrt(_entry(Sigma, 0, 0))
        return ndtr(mu[:, 0] / s) * np.ones(B)
    if m == 2:
        s1 = np.sqrt(_entry(Sigma, 0, 0))
        s2 = np.sqrt(_entry(Sigma, 1, 1))
        rho = _entry(Sigma, 0, 1) / (s1 * s2)
        return bvnu(-mu[:, 0] / s1, -mu[:, 1] / s2, rho * np.ones(B))
    # condition on the last coordinate
    j = m - 1
    sj2 = _entry(Sigma, j, j)
    sj = np.sqrt(sj2)
    cross = Sigma[..., :j, j]
    if Sigma.ndim == 3:
        Sig_c = Sigma[..., :j, :j] - cross[:, :, None] * cross[:, None, :] / sj2[:, None, None]
        beta = cross / sj[:, None]
    else:
        Sig_c = Sigma[:j, :j] - np.outer(cross, cross) / sj2
        beta = cross / sj
    out = np.zeros(B)
    a = -mu[:, j] / (sj * np.ones(B))
    lo = np.maximum(a, -_TAIL)
    width = np.maximum(_TAIL - lo, 0.0)
    alive = width > 0
    if not np.any(alive):
        return out
    half = 0.5 * width[alive]
    mid = lo[alive] + half
    mu_a = mu[alive]
    if Sigma.ndim == 3:
        Sig_ca = Sig_c[alive]
        beta_a = beta[alive]
    else:
        Sig_ca = Sig_c
        beta_a = beta
    acc = np.zeros(half.shape)
    for xi, wi in zip(_COND_X, _COND_W):
        s = mid + half * xi
        if Sigma.ndim == 3:
            mu_c = mu_a[:, :j] + s[:, None] * beta_a
        else:
            mu_c = mu_a[:, :j] + np.outer(s, beta_a)
        q = orthant_q(mu_c, Sig_ca)
        acc += wi * np.exp(-0.5 * s * s) * q
    out[alive] = acc * half / _SQRT2PI
    return out


def orthant_grad(mu, Sigma):
    """d/dmu of P(x > 0); returns (B, m)."""
    mu = np.atleast_2d(np.asarray(mu, float))
    Sigma = np.asarray(Sigma, float)
    B, m = mu.shape
    G = np.zeros((B, m))
    for kk in range(m):
        skk = _entry(Sigma, kk, kk)
        sk = np.sqrt(skk)
        fk = np.exp(-0.5 * (mu[:, kk] / sk) ** 2) / (_SQRT2PI * sk)
        if m == 1:
            G[:, 0] = fk
            continue
        idx = [i for i in range(m) if i != kk]
        cross = Sigma[..., idx, kk]
        if Sigma.ndim == 3:
            mu_c = mu[:, idx] - (mu[:, kk] / skk)[:, None] * cross
            Sig_c = (Sigma[..., idx, :][..., :, idx]
                     - cross[:, :, None] * cross[:, None, :] / skk[:, None, None])
        else:
            mu_c = mu[:, idx] - np.outer(mu[:, kk] / skk, cross)
            Sig_c = Sigma[np.ix_(idx, idx)] - np.outer(cross, cross) / skk
        G[:, kk] = fk * orthant_q(mu_c, Sig_c)
    return G


def orthant_hess(mu, Sigma):
    """d2/dmu2 of P(x > 0); returns (B, m, m)."""
    mu = np.atleast_2d(np.asarray(mu, float))
    Sigma = np.asarray(Sigma, float)
    B, m = mu.shape
    H = np.zeros((B, m, m))
    G = orthant_grad(mu, Sigma)
    for kk in range(m):
        for ll in range(kk + 1, m):
            pair = [kk, ll]
            S00 = _entry(Sigma, kk, kk)
            S11 = _entry(Sigma, ll, ll)
            S01 = _entry(Sigma, kk, ll)
            det2 = S00 * S11 - S01 ** 2
            mu0, mu1 = mu[:, kk], mu[:, ll]
            quad = (mu0 ** 2 * S11 - 2 * mu0 * mu1 * S01 + mu1 ** 2 * S00) / det2
            f2 = np.exp(-0.5 * quad) / (2.0 * np.pi * np.sqrt(det2))
            if m == 2:
                qc = 1.0
            else:
                idx = [i for i in range(m) if i != kk and i != ll]
                mu2 = mu[:, pair]
                if Sigma.ndim == 3:
                    Si = np.empty((B, 2, 2))
                    Si[:, 0, 0] = S11 / det2
                    Si[:, 1, 1] = S00 / det2
                    Si[:, 0, 1] = Si[:, 1, 0] = -S01 / det2
                    C = Sigma[..., idx, :][..., :, pair]
                    adj = np.einsum('bij,bjk->bik', C, Si)
                    mu_c = mu[:, idx] - np.einsum('bj,bij->bi', mu2, adj)
                    Sig_c = (Sigma[..., idx, :][..., :, idx]
                             - np.einsum('bik,bjk->bij', adj, C))
                else:
                    Si = np.array([[S11, -S01], [-S01, S00]]) / det2
                    C = Sigma[np.ix_(idx, pair)]
                    adj = C @ Si
                    mu_c = mu[:, idx] - mu2 @ adj.T
                    Sig_c = Sigma[np.ix_(idx, idx)] - adj @ C.T
                qc = orthant_q(mu_c, Sig_c)
            H[:, kk, ll] = f2 * qc
            H[:, ll, kk] = H[:, kk, ll]
    for kk in range(m):
        skk = _entry(Sigma, kk, kk)
        acc = -(mu[:, kk] / skk) * G[:, kk]
        for ll in range(m):
            if ll != kk:
                acc = acc - (_entry(Sigma, ll, kk) / skk) * H[:, kk, ll]
        H[:, kk, kk] = acc
    return H


def truncated_moments(mu, Sigma, order=2):
    """(Q, E[x 1_{x>0}], E[x x^T 1_{x>0}]) for x ~ N(mu, Sigma).

    order=1 skips the Hessian evaluations and returns T2=None; the
    second moment is by far the most expensive piece at m >= 3.
    """
    mu = np.atleast_2d(np.asarray(mu, float))
    Sigma = np.asarray(Sigma, float)
    Q = orthant_q(mu, Sigma)
    G = orthant_grad(mu, Sigma)
    if Sigma.ndim == 3:
        SG = np.einsum('bij,bj->bi', Sigma, G)
    else:
        SG = G @ Sigma.T
    T1 = mu * Q[:, None] + SG
    if order < 2:
        return Q, T1, None
    H = orthant_hess(mu, Sigma)
    if Sigma.ndim == 3:
        SHS = np.einsum('bij,bjk,bkl->bil', Sigma, H, Sigma)
        Sq = Sigma * Q[:, None, None]
    else:
        SHS = np.einsum('ij,bjk,kl->bil', Sigma, H, Sigma)
        Sq = Sigma[None, :, :] * Q[:, None, None]
    T2 = (Sq
          + mu[:, :, None] * mu[:, None, :] * Q[:, None, None]
          + mu[:, :, None] * SG[:, None, :]
          + SG[:, :, None] * mu[:, None, :]
          + SHS)
    return Q, T1, T2
