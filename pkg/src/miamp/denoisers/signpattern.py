"""Denoiser for links determined by the sign pattern of z (parity, committee).

The posterior is a mixture of sign-orthant-truncated Gaussians. Orthant
probabilities and truncated moments come from the gaussian module, so the
engine is exact up to that quadrature for p <= 4. Additive label noise is
handled by Gaussian pattern weights instead of indicator weights.
"""

import itertools

import numpy as np

from .. import gaussian
from ..errors import DegenerateLikelihood
from ._common import assemble, transform_sigma

_Z_FLOOR = 1e-300


def _pattern_values(channel):
    p = channel.p
    pats = np.array(list(itertools.product((1.0, -1.0), repeat=p)))
    vals = channel.link(pats)
    return pats, vals


def signpattern_eval(channel, pack, y, omega, order=2):
    p = channel.p
    n = y.shape[0]
    pats, vals = _pattern_values(channel)
    noise = channel.noise
    if noise > 0.0:
        cw = np.exp(-0.5 * (y[:, None] - vals[None]) ** 2 / noise ** 2) \
            / (np.sqrt(2.0 * np.pi) * noise)              # (n, n_pat)
    else:
        cw = (np.abs(y[:, None] - vals[None]) < 1e-9).astype(float)
        if np.any(cw.sum(axis=1) == 0):
            bad = int(np.argmax(cw.sum(axis=1) == 0))
            raise DegenerateLikelihood(
                f"label y={y[bad]:.6g} is not an attainable pattern value")
    Z = np.zeros(n)
    M1 = np.zeros((n, p))
    M2 = np.zeros((n, p, p)) if order >= 2 else None
    for j, s in enumerate(pats):
        wj = cw[:, j]
        act = wj > 0.0
        if not np.any(act):
            continue
        mu = omega[act] * s[None, :]
        Sig = transform_sigma(pack.V[act] if pack.batched else pack.V, s)
        Q, T1, T2 = gaussian.truncated_moments(mu, Sig, order=order)
        wa = wj[act]
        Z[act] += wa * Q
        M1[act] += wa[:, None] * (T1 * s[None, :])
        if order >= 2:
            M2[act] += wa[:, None, None] * (s[:, None] * T2 * s[None, :])
    norm = np.maximum(Z, _Z_FLOOR)
    if np.any(Z < _Z_FLOOR):
        bad = int(np.argmax(Z < _Z_FLOOR))
        raise DegenerateLikelihood(
            f"posterior weight underflow at sample {bad} (y={y[bad]:.6g})")
    m = M1 / norm[:, None]
    S = M2 / norm[:, None, None] if order >= 2 else None
    out = assemble(pack, omega, Z, m, S)
    out["est_error"] = np.full(n, 3e-9 if p >= 3 else 1e-12)
    return out
