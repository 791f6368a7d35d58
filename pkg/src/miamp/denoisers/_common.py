"""Shared plumbing for the denoiser engines.

Every engine works on a batch: y (n,), omega (n, p), V either shared (p, p)
or per-sample (n, p, p). Engines return posterior moments; the dispatcher
assembles g_out values and jacobians from them unless the engine supplies
its own jacobian.
"""

import numpy as np

from ..errors import DimensionMismatch, SingularV

Z_FLOOR = 1e-300


class VPack:
    """Regularized V with cached inverse/cholesky, shared or batched."""

    def __init__(self, V, p, n, v_reg):
        V = np.asarray(V, float)
        if V.ndim == 2:
            if V.shape != (p, p):
                raise DimensionMismatch(f"V shape {V.shape}, expected ({p},{p})")
            self.batched = False
        elif V.ndim == 3:
            if V.shape != (n, p, p):
                raise DimensionMismatch(
                    f"V shape {V.shape}, expected ({n},{p},{p})")
            self.batched = True
        else:
            raise DimensionMismatch("V must be (p,p) or (n,p,p)")
        Vs = 0.5 * (V + np.swapaxes(V, -1, -2))
        if np.max(np.abs(Vs - V)) > 1e-10:
            raise SingularV("V is not symmetric")
        w, Q = np.linalg.eigh(Vs)
        if np.min(w) < -10.0 * v_reg:
            raise SingularV(f"V has eigenvalue {np.min(w):.3e} < 0")
        w = np.maximum(w, v_reg)
        # clamp only low eigenvalues; well-conditioned V passes through intact
        self.V = np.einsum('...ab,...b,...cb->...ac', Q, w, Q)
        self.inv = np.einsum('...ab,...b,...cb->...ac', Q, 1.0 / w, Q)
        self.chol = np.linalg.cholesky(self.V)
        self.p = p
        self.n = n

    def pick(self, idx):
        """V rows for a sample subset (shared V broadcasts)."""
        return self.V[idx] if self.batched else self.V

    def apply_inv(self, x):
        """V^{-1} x for x of shape (n, p)."""
        if self.batched:
            return np.einsum('iab,ib->ia', self.inv, x)
        return x @ self.inv.T


def assemble(pack, omega, z, m, S, jac=None):
    """g_out value and jacobian from normalized posterior moments.

    z: normalization Z_out (n,); m: posterior mean (n,p); S: posterior
    second moment about zero (n,p,p). jacobian defaults to the identity
    V^{-1} Cov V^{-1} - V^{-1}.
    """
    value = pack.apply_inv(m - omega)
    if jac is None and S is not None:
        cov = S - np.einsum('ia,ib->iab', m, m)
        if pack.batched:
            jac = np.einsum('iab,ibc,icd->iad', pack.inv, cov, pack.inv) \
                - pack.inv
        else:
            jac = np.einsum('ab,ibc,cd->iad', pack.inv, cov, pack.inv) \
                - pack.inv[None]
    return {"z_out": z, "value": value, "jacobian": jac, "m": m, "S": S}


def transform_sigma(V, s):
    """diag(s) V diag(s) for a sign vector s; V shared or batched."""
    return s[:, None] * V * s[None, :]
