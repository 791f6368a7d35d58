"""Gaussian multi-index channels: link catalog, symmetries, sampling.

A channel is y = g(z) (+ optional additive Gaussian noise), z = W* x with
x ~ N(0, I_d / d) and teacher rows i.i.d. standard normal. p = z-dimension
is capped at 8.
"""

from dataclasses import dataclass, field
import itertools

import numpy as np

from .errors import (AllocationTooLarge, DimensionMismatch, InvalidSpec,
                     UnsupportedDimension)
from .rng import stream

MAX_P = 8

# dataset entry budget (X matrix entries); ~2 GB of float64
DEFAULT_MAX_ENTRIES = 250_000_000

CATALOG_KINDS = ("parity", "monomial", "sum-squares", "committee",
                 "square-plus-parity", "staircase", "linear", "poly", "custom")


@dataclass(frozen=True)
class LinkSpec:
    kind: str
    p: int
    terms: tuple = None          # ((coeff, (e_1..e_p)), ...) for staircase/poly
    noise: float = 0.0           # additive Gaussian std on y
    evaluator: object = None     # custom links: callable z (B,p) -> y (B,)
    evaluator_grad: object = None
    output_law: str = None       # custom links must declare


@dataclass(frozen=True)
class SymmetryGroup:
    """Declared invariances g(P sigma z) = g(z).

    perm_orbits: coordinates may be permuted within each orbit.
    sign_patterns: explicit tuple of +-1 patterns (includes all-ones).
    """
    perm_orbits: tuple
    sign_patterns: tuple

    def permutations(self):
        """All coordinate permutations preserving the orbits (as tuples)."""
        p = sum(len(o) for o in self.perm_orbits)
        pools = [list(itertools.permutations(o)) for o in self.perm_orbits]
        out = []
        for combo in itertools.product(*pools):
            perm = [0] * p
            for orbit, image in zip(self.perm_orbits, combo):
                for a, b in zip(orbit, image):
                    perm[a] = b
            out.append(tuple(perm))
        return out


@dataclass(frozen=True)
class Channel:
    spec: LinkSpec
    p: int
    output_law: str              # "finite-discrete" | "continuous"
    output_values: tuple         # sorted values, or None
    backend: str                 # "analytic" | "orthant" | "smoothed"
    symmetry: SymmetryGroup
    link: object = field(repr=False)          # deterministic part, (B,p)->(B,)
    link_grad: object = field(repr=False)     # (B,p)->(B,p) or None
    noise: float = 0.0

    def evaluate(self, z, rng=None):
        z = np.atleast_2d(np.asarray(z, float))
        if z.shape[1] != self.p:
            raise DimensionMismatch(
                f"z has {z.shape[1]} coordinates, channel has p={self.p}")
        y = self.link(z)
        if self.noise > 0.0:
            if rng is None:
                raise InvalidSpec("noisy channel needs an rng for evaluation")
            y = y + self.noise * rng.standard_normal(y.shape)
        return y


def evaluate_link(channel, z, rng=None):
    """y = g(z) (+ noise drawn from rng). Scalar in, scalar out."""
    z = np.asarray(z, float)
    single = z.ndim == 1
    y = channel.evaluate(z, rng)
    return float(y[0]) if single else y


# ---------------------------------------------------------------- link bodies

def _signs(z):
    return np.where(z >= 0, 1.0, -1.0)


def _terms_eval(terms, z):
    y = np.zeros(z.shape[0])
    for c, ex in terms:
        t = np.full(z.shape[0], c)
        for k, e in enumerate(ex):
            if e:
                t = t * z[:, k] ** e
        y += t
    return y


def _terms_grad(terms, z):
    g = np.zeros_like(z)
    for c, ex in terms:
        for k, e in enumerate(ex):
            if not e:
                continue
            t = np.full(z.shape[0], c * e)
            for j, ej in enumerate(ex):
                pw = ej - 1 if j == k else ej
                if pw:
                    t = t * z[:, j] ** pw
            g[:, k] += t
    return g


def staircase_terms(p):
    """z1 + z1 z2 + ... + z1 z2 ... zp as a term list."""
    out = []
    for k in range(1, p + 1):
        ex = tuple(1 if i < k else 0 for i in range(p))
        out.append((1.0, ex))
    return tuple(out)


def _sign_pattern_group(p, valid):
    pats = []
    for bits in itertools.product((1.0, -1.0), repeat=p):
        if valid(np.array(bits)):
            pats.append(bits)
    return tuple(pats)


def _poly_sign_group(p, terms):
    def valid(sig):
        for _, ex in terms:
            s = 1.0
            for k, e in enumerate(ex):
                if e % 2:
                    s *= sig[k]
            if s < 0:
                return False
        return True
    return _sign_pattern_group(p, valid)


def _full_orbits(p):
    return (tuple(range(p)),)


def _single_orbits(p):
    return tuple((k,) for k in range(p))


def build_channel(spec):
    """Instantiate a Channel from a LinkSpec, picking the best backend."""
    p = spec.p
    if not (1 <= p <= MAX_P):
        raise UnsupportedDimension(f"p={p} outside 1..{MAX_P}")
    if spec.noise < 0:
        raise InvalidSpec("noise std must be >= 0")
    kind = spec.kind
    if kind not in CATALOG_KINDS:
        raise InvalidSpec(f"unknown link kind {kind!r}")

    terms = spec.terms
    grad = None
    output_values = None

    if kind == "parity":
        link = lambda z: np.prod(_signs(z), axis=1)
        output_values = (-1.0, 1.0)
        sym = SymmetryGroup(_full_orbits(p),
                            _sign_pattern_group(p, lambda s: np.prod(s) > 0))
        backend = "analytic" if p <= 2 else ("orthant" if p <= 4 else "smoothed")
    elif kind == "committee":
        link = lambda z: np.sum(_signs(z), axis=1)
        output_values = tuple(float(v) for v in range(-p, p + 1, 2))
        sym = SymmetryGroup(_full_orbits(p), ((1.0,) * p,))
        backend = "orthant" if p <= 4 else "smoothed"
    elif kind == "monomial":
        link = lambda z: np.prod(z, axis=1)
        grad_terms = ((1.0, (1,) * p),)
        grad = lambda z: _terms_grad(grad_terms, z)
        sym = SymmetryGroup(_full_orbits(p),
                            _sign_pattern_group(p, lambda s: np.prod(s) > 0))
        backend = "analytic" if p <= 2 else "smoothed"
    elif kind == "sum-squares":
        link = lambda z: np.sum(z * z, axis=1) / p
        grad = lambda z: 2.0 * z / p
        sym = SymmetryGroup(_full_orbits(p),
                            _sign_pattern_group(p, lambda s: True))
        backend = "analytic" if p <= 3 else "smoothed"
    elif kind == "square-plus-parity":
        if p < 2:
            raise InvalidSpec("square-plus-parity needs p >= 2")
        link = lambda z: z[:, 0] ** 2 + np.prod(_signs(z), axis=1)
        # no grad: the link jumps, so a pathwise derivative would be wrong
        sym = SymmetryGroup(((0,), tuple(range(1, p))),
                            _sign_pattern_group(p, lambda s: np.prod(s) > 0))
        backend = "analytic" if p <= 4 else "smoothed"
    elif kind == "linear":
        link = lambda z: np.sum(z, axis=1)
        grad = lambda z: np.ones_like(z)
        sym = SymmetryGroup(_full_orbits(p), ((1.0,) * p,))
        backend = "analytic"
    elif kind in ("staircase", "poly"):
        if kind == "staircase" and terms is None:
            terms = staircase_terms(p)
        if not terms:
            raise InvalidSpec(f"{kind} link needs a non-empty term list")
        for c, ex in terms:
            if len(ex) != p:
                raise InvalidSpec("term exponent tuple length must equal p")
        tt = tuple((float(c), tuple(int(e) for e in ex)) for c, ex in terms)
        terms = tt
        link = lambda z: _terms_eval(tt, z)
        grad = lambda z: _terms_grad(tt, z)
        sym = SymmetryGroup(_single_orbits(p), _poly_sign_group(p, tt))
        backend = "analytic" if (kind == "poly" and p == 1) else "smoothed"
    else:  # custom
        if spec.evaluator is None:
            raise InvalidSpec("custom link needs an evaluator")
        if spec.output_law not in ("finite-discrete", "continuous"):
            raise InvalidSpec("custom link must declare its output law")
        link = spec.evaluator
        grad = spec.evaluator_grad
        sym = SymmetryGroup(_single_orbits(p), ((1.0,) * p,))
        backend = "smoothed"

    if spec.noise > 0.0 and kind not in ("parity", "committee", "linear"):
        # exact noise handling is only wired for pattern and linear links
        backend = "smoothed"

    if kind == "custom":
        law = spec.output_law
        output_values = None
    elif output_values is not None and spec.noise == 0.0:
        law = "finite-discrete"
        output_values = tuple(sorted(output_values))
    else:
        law = "continuous"
        output_values = None

    spec2 = spec if spec.terms == terms else LinkSpec(
        kind, p, terms, spec.noise, spec.evaluator, spec.evaluator_grad,
        spec.output_law)
    return Channel(spec=spec2, p=p, output_law=law, output_values=output_values,
                   backend=backend, symmetry=sym, link=link, link_grad=grad,
                   noise=spec.noise)


# ---------------------------------------------------------------- datasets

@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    W_star: np.ndarray
    seed: int
    alpha: float

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def d(self):
        return self.X.shape[1]


def sample_dataset(channel, d, alpha, seed, max_entries=DEFAULT_MAX_ENTRIES):
    """n = round(alpha d) covariate rows with variance 1/d, teacher labels."""
    if d < 10:
        raise InvalidSpec("d must be at least 10")
    if alpha <= 0:
        raise InvalidSpec("alpha must be positive")
    n = int(round(alpha * d))
    if n * d > max_entries:
        raise AllocationTooLarge(
            f"n*d = {n * d} exceeds the budget {max_entries}")
    X = stream(seed, "dataset-X").standard_normal((n, d)) / np.sqrt(d)
    W = stream(seed, "dataset-W").standard_normal((channel.p, d))
    z = X @ W.T
    y = channel.evaluate(z, stream(seed, "dataset-noise"))
    return Dataset(X=X, y=y, W_star=W, seed=seed, alpha=alpha)


# ---------------------------------------------------------------- alignment

def enumerate_group(symmetry, p, cap=200_000):
    """All (perm, signs) elements, for modest group sizes."""
    perms = symmetry.permutations()
    out = []
    for perm in perms:
        for sig in symmetry.sign_patterns:
            out.append((perm, sig))
            if len(out) > cap:
                raise InvalidSpec("symmetry group too large to enumerate")
    return out
