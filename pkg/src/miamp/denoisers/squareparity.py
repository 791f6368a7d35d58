"""Denoiser for y = z1^2 + prod_k sign(z_k) (noiseless).

Conditioning on the parity bit b and the sign of z1 pins z1 to one of the
two square roots of y - b; the remaining coordinates form a sign-pattern
problem for the conditional (p-1)-variate Gaussian, with the pattern
product constrained to b * sign(z1).
"""

import itertools

import numpy as np

from .. import gaussian
from ..errors import DegenerateLikelihood
from ._common import assemble, transform_sigma

_Z_FLOOR = 1e-300


def squareparity_eval(channel, pack, y, omega):
    p = channel.p
    n = y.shape[0]
    q = p - 1
    rest_pats = np.array(list(itertools.product((1.0, -1.0), repeat=q)))
    rest_prod = np.prod(rest_pats, axis=1)

    if pack.batched:
        V11 = pack.V[:, 0, 0]
        V1r = pack.V[:, 0, 1:]
        Schur = pack.V[:, 1:, 1:] \
            - np.einsum('ia,ib->iab', V1r, V1r) / V11[:, None, None]
    else:
        V11 = pack.V[0, 0]
        V1r = pack.V[0, 1:]
        Schur = pack.V[1:, 1:] - np.outer(V1r, V1r) / V11

    Z = np.zeros(n)
    M1 = np.zeros((n, p))
    M2 = np.zeros((n, p, p))
    any_branch = np.zeros(n, bool)

    for b in (1.0, -1.0):
        r2 = y - b
        act_b = r2 > 0.0
        if not np.any(act_b):
            continue
        any_branch |= act_b
        root = np.sqrt(np.maximum(r2, 1e-300))
        for s1 in (1.0, -1.0):
            z1 = s1 * root                                     # (n,)
            dv = (z1 - omega[:, 0])
            w1 = np.exp(-0.5 * dv[act_b] ** 2 /
                        (V11[act_b] if pack.batched else V11)) \
                / np.sqrt(2.0 * np.pi * (V11[act_b] if pack.batched else V11))
            w1 = w1 / (2.0 * root[act_b])
            if pack.batched:
                mu_c = omega[act_b, 1:] + V1r[act_b] \
                    * (dv[act_b] / V11[act_b])[:, None]
                Sig_c = Schur[act_b]
            else:
                mu_c = omega[act_b, 1:] + np.outer(dv[act_b] / V11, V1r)
                Sig_c = Schur
            target = b * s1
            idx = np.nonzero(act_b)[0]
            for j in np.nonzero(rest_prod == target)[0]:
                tau = rest_pats[j]
                Q, T1, T2 = gaussian.truncated_moments(
                    mu_c * tau[None, :], transform_sigma(Sig_c, tau))
                wq = w1 * Q
                Z[idx] += wq
                M1[idx, 0] += wq * z1[idx]
                m_rest = w1[:, None] * (T1 * tau[None, :])
                M1[idx, 1:] += m_rest
                M2[idx, 0, 0] += wq * z1[idx] ** 2
                cross = z1[idx, None] * m_rest
                M2[idx, 0, 1:] += cross
                M2[idx, 1:, 0] += cross
                rows = np.arange(1, p)
                M2[idx[:, None, None], rows[None, :, None], rows[None, None, :]] += \
                    w1[:, None, None] * (tau[:, None] * T2 * tau[None, :])

    if np.any(~any_branch):
        bad = int(np.argmax(~any_branch))
        raise DegenerateLikelihood(
            f"label y={y[bad]:.6g} <= -1 has no preimage")
    norm = np.maximum(Z, _Z_FLOOR)
    if np.any(Z < _Z_FLOOR):
        bad = int(np.argmax(Z < _Z_FLOOR))
        raise DegenerateLikelihood(
            f"posterior weight underflow at sample {bad} (y={y[bad]:.6g})")
    m = M1 / norm[:, None]
    S = M2 / norm[:, None, None]
    out = assemble(pack, omega, Z, m, S)
    out["est_error"] = np.full(n, 3e-9)
    return out
