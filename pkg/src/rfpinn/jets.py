"""Truncated Taylor carriers ("jets") for nested spatial differentiation.

A jet stores the Taylor coefficients of a scalar field with respect to a
small set of seed variables (spatial coordinates, optionally time), up to a
fixed truncation order. Arithmetic on jets propagates exact derivatives, so
the value, gradient and Hessian of any composed expression come out to
machine precision. Coefficients are held as numpy arrays with an arbitrary
batch shape, which lets a single jet carry an entire collocation set.

Coefficients are Taylor coefficients, not raw derivatives: the entry for
multi-index alpha is (d^alpha f) / alpha!. This makes multiplication a plain
convolution over multi-indices with no multinomial bookkeeping.
"""

from __future__ import annotations

import itertools
import math

import numpy as np
from scipy import special


def _multi_indices(nvars, order):
    out = []
    for total in range(order + 1):
        combos = sorted(
            (alpha for alpha in itertools.product(range(total + 1), repeat=nvars)
             if sum(alpha) == total),
            reverse=True,
        )
        out.extend(combos)
    return tuple(out)


class JetSpace:
    """Layout tables for one truncation (a downward-closed multi-index set).

    Instances are cached; two jets interoperate only if they share a space.
    Dropping a component set that is upward closed (e.g. all mixed partials)
    yields a consistent quotient algebra: retained coefficients never depend
    on dropped ones.
    """

    _cache = {}

    def __new__(cls, nvars, order, mindex):
        key = (nvars, order, mindex)
        hit = cls._cache.get(key)
        if hit is not None:
            return hit
        self = super().__new__(cls)
        self.nvars = nvars
        self.order = order
        self.mindex = mindex
        self.ncomp = len(mindex)
        self.index = {alpha: k for k, alpha in enumerate(mindex)}
        # flat multiplication table: out[k] += a[i] * b[j]
        triples = []
        for i, ai in enumerate(self.mindex):
            for j, bj in enumerate(self.mindex):
                tgt = tuple(x + y for x, y in zip(ai, bj))
                k = self.index.get(tgt)
                if k is not None:
                    triples.append((k, i, j))
        self.triples = tuple(triples)
        self.triples_arr = np.array(triples, dtype=np.int64)
        # first-occurrence flags let kernels assign instead of accumulate
        # on uninitialized buffers (one flag set per slot role)
        firsts = np.zeros((len(triples), 3), dtype=np.int8)
        for slot in range(3):
            seen = set()
            for t, tri in enumerate(triples):
                if tri[slot] not in seen:
                    firsts[t, slot] = 1
                    seen.add(tri[slot])
        self.first_arr = firsts
        self.factorial = np.array(
            [math.prod(math.factorial(a) for a in alpha) for alpha in self.mindex]
        )
        cls._cache[key] = self
        return self

    def seed_comp(self, v):
        """Component index of the first-order coefficient for variable v."""
        alpha = tuple(1 if i == v else 0 for i in range(self.nvars))
        return self.index[alpha]

    def __repr__(self):
        return (f"JetSpace(nvars={self.nvars}, order={self.order}, "
                f"ncomp={self.ncomp})")


def space(nvars, order):
    """Full truncated space with every multi-index up to the given order."""
    return JetSpace(nvars, order, _multi_indices(nvars, order))


def space_lap(nspatial, with_time=False):
    """Reduced second-order space for Laplacian-based losses.

    Carries the value, all first derivatives, and only the pure second
    derivatives of the spatial variables; mixed terms (and the pure second
    time derivative) are dropped, which shrinks the carrier without
    affecting the retained components.
    """
    nvars = nspatial + (1 if with_time else 0)
    mindex = [tuple(0 for _ in range(nvars))]
    for v in range(nvars):
        mindex.append(tuple(1 if i == v else 0 for i in range(nvars)))
    for v in range(nspatial):
        mindex.append(tuple(2 if i == v else 0 for i in range(nvars)))
    sp = JetSpace(nvars, 2, tuple(mindex))
    sp.lap_layout = (nvars, nspatial)
    return sp


# ---------------------------------------------------------------------------
# derivative tables for the supported elementary functions
# value plus derivatives up to requested order k (k <= 4)
# ---------------------------------------------------------------------------

_INV_SQRT_PI = 1.0 / math.sqrt(math.pi)


def derivs_exp(x, k):
    e = np.exp(x)
    return [e] * (k + 1)


def derivs_log(x, k):
    out = [np.log(x)]
    if k >= 1:
        out.append(1.0 / x)
    for n in range(2, k + 1):
        out.append(out[-1] * (-(n - 1)) / x)
    return out


def derivs_sin(x, k):
    s, c = np.sin(x), np.cos(x)
    cycle = [s, c, -s, -c]
    return [cycle[n % 4] for n in range(k + 1)]


def derivs_cos(x, k):
    s, c = np.sin(x), np.cos(x)
    cycle = [c, -s, -c, s]
    return [cycle[n % 4] for n in range(k + 1)]


def derivs_tanh(x, k):
    t = np.tanh(x)
    sech2 = 1.0 - t * t
    out = [t]
    if k >= 1:
        out.append(sech2)
    if k >= 2:
        out.append(-2.0 * t * sech2)
    if k >= 3:
        out.append(sech2 * (6.0 * t * t - 2.0))
    if k >= 4:
        out.append(sech2 * (16.0 * t - 24.0 * t**3))
    if k >= 5:
        raise ValueError("tanh derivatives implemented up to order 4")
    return out


def derivs_sigmoid(x, k):
    s = special.expit(x)
    out = [s]
    if k >= 1:
        d1 = s * (1.0 - s)
        out.append(d1)
    if k >= 2:
        d2 = d1 * (1.0 - 2.0 * s)
        out.append(d2)
    if k >= 3:
        d3 = d2 * (1.0 - 2.0 * s) - 2.0 * d1 * d1
        out.append(d3)
    if k >= 4:
        out.append(out[3] * (1.0 - 2.0 * s) - 6.0 * d1 * d2)
    if k >= 5:
        raise ValueError("sigmoid derivatives implemented up to order 4")
    return out


def derivs_erf(x, k):
    g = 2.0 * _INV_SQRT_PI * np.exp(-x * x)
    out = [special.erf(x)]
    if k >= 1:
        out.append(g)
    if k >= 2:
        out.append(-2.0 * x * g)
    if k >= 3:
        out.append((4.0 * x * x - 2.0) * g)
    if k >= 4:
        out.append((12.0 * x - 8.0 * x**3) * g)
    if k >= 5:
        raise ValueError("erf derivatives implemented up to order 4")
    return out


def derivs_pow(x, p, k):
    out = [x**p]
    coeff = 1.0
    for n in range(1, k + 1):
        coeff *= p - (n - 1)
        out.append(coeff * x ** (p - n))
    return out


def derivs_sqrt(x, k):
    return derivs_pow(x, 0.5, k)


def derivs_recip(x, k):
    out = [1.0 / x]
    for n in range(1, k + 1):
        out.append(out[-1] * (-n) / x)
    return out


def derivs_silu(x, k):
    """x * sigmoid(x); derivatives by the Leibniz rule."""
    sig = derivs_sigmoid(x, k)
    out = [x * sig[0]]
    for n in range(1, k + 1):
        out.append(x * sig[n] + n * sig[n - 1])
    return out


def derivs_gelu(x, k):
    """x * Phi(x) with the exact Gaussian CDF (erf form)."""
    cdf = 0.5 * (1.0 + special.erf(x / math.sqrt(2.0)))
    x2 = x * x
    pdf = np.exp(-0.5 * x2) / math.sqrt(2.0 * math.pi)
    out = [x * cdf]
    if k >= 1:
        out.append(cdf + x * pdf)
    if k >= 2:
        out.append((2.0 - x2) * pdf)
    if k >= 3:
        out.append((x2 - 4.0) * (x * pdf))
    if k >= 4:
        out.append((7.0 * x2 - 4.0 - x2 * x2) * pdf)
    if k >= 5:
        raise ValueError("gelu derivatives implemented up to order 4")
    return out


class Jet:
    """A batched truncated Taylor scalar.

    coef has shape (space.ncomp, *batch); batch may include a trailing
    feature axis so a jet can carry a whole network layer at once.
    """

    __slots__ = ("space", "coef")

    def __init__(self, space, coef):
        self.space = space
        self.coef = coef

    # -- constructors -------------------------------------------------------

    @classmethod
    def seeds(cls, space, coords):
        """Seed jet for the coordinates themselves.

        coords: array of shape (*batch, nvars). Returns a jet with batch
        shape (*batch, nvars) where column v is the v-th coordinate seeded
        with unit first derivative along variable v.
        """
        coords = np.asarray(coords, dtype=float)
        if coords.shape[-1] != space.nvars:
            raise ValueError(
                f"expected last axis {space.nvars}, got {coords.shape[-1]}"
            )
        coef = np.zeros((space.ncomp,) + coords.shape)
        coef[0] = coords
        if space.order >= 1:
            for v in range(space.nvars):
                coef[space.seed_comp(v), ..., v] = 1.0
        return cls(space, coef)

    @classmethod
    def variable(cls, space, values, var):
        """Seed jet for a single coordinate with batch shape values.shape."""
        values = np.asarray(values, dtype=float)
        coef = np.zeros((space.ncomp,) + values.shape)
        coef[0] = values
        if space.order >= 1:
            coef[space.seed_comp(var)] = 1.0
        return cls(space, coef)

    @classmethod
    def const(cls, space, values):
        values = np.asarray(values, dtype=float)
        coef = np.zeros((space.ncomp,) + values.shape)
        coef[0] = values
        return cls(space, coef)

    # -- extraction ----------------------------------------------------------

    @property
    def value(self):
        return self.coef[0]

    def deriv(self, alpha):
        """Partial derivative for a multi-index, with factorial weights."""
        k = self.space.index[tuple(alpha)]
        return self.coef[k] * self.space.factorial[k]

    def first(self, v):
        return self.coef[self.space.seed_comp(v)]

    def gradient(self):
        return np.stack([self.first(v) for v in range(self.space.nvars)])

    def second(self, i, j):
        alpha = [0] * self.space.nvars
        alpha[i] += 1
        alpha[j] += 1
        return self.deriv(alpha)

    def hessian(self):
        n = self.space.nvars
        h = np.stack(
            [np.stack([self.second(i, j) for j in range(n)]) for i in range(n)]
        )
        return h

    def laplacian(self, nspatial=None):
        n = self.space.nvars if nspatial is None else nspatial
        return sum(self.second(i, i) for i in range(n))

    def third(self, i, j, k):
        alpha = [0] * self.space.nvars
        alpha[i] += 1
        alpha[j] += 1
        alpha[k] += 1
        return self.deriv(alpha)

    # -- helpers -------------------------------------------------------------

    def _zeros_like(self):
        return np.zeros_like(self.coef)

    def _coerce(self, other):
        if isinstance(other, Jet):
            if other.space is not self.space:
                raise ValueError("jets from different spaces")
            return other
        return None

    def copy(self):
        return Jet(self.space, self.coef.copy())

    @property
    def batch_shape(self):
        return self.coef.shape[1:]

    # -- ring arithmetic ------------------------------------------------------

    def __add__(self, other):
        o = self._coerce(other)
        if o is not None:
            return Jet(self.space, self.coef + o.coef)
        out = self.coef.copy()
        out[0] = out[0] + other
        return Jet(self.space, out)

    __radd__ = __add__

    def __neg__(self):
        return Jet(self.space, -self.coef)

    def __sub__(self, other):
        o = self._coerce(other)
        if o is not None:
            return Jet(self.space, self.coef - o.coef)
        out = self.coef.copy()
        out[0] = out[0] - other
        return Jet(self.space, out)

    def __rsub__(self, other):
        out = -self.coef
        out[0] = out[0] + other
        return Jet(self.space, out)

    def __mul__(self, other):
        o = self._coerce(other)
        if o is None:
            return Jet(self.space, self.coef * other)
        a, b = self.coef, o.coef
        if (a.shape == b.shape and a.dtype == b.dtype == np.float64
                and a.flags.c_contiguous and b.flags.c_contiguous):
            from ._kernels import jet_mul
            return Jet(self.space, jet_mul(self.space, a, b))
        out = np.zeros(np.broadcast_shapes(a.shape, b.shape))
        for k, i, j in self.space.triples:
            out[k] += a[i] * b[j]
        return Jet(self.space, out)

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = self._coerce(other)
        if o is None:
            return Jet(self.space, self.coef / other)
        return self * o.recip()

    def __rtruediv__(self, other):
        return self.recip() * other

    def __pow__(self, p):
        if isinstance(p, int) or (isinstance(p, float) and p.is_integer()):
            p = int(p)
            if p == 0:
                return Jet.const(self.space, np.ones(self.batch_shape))
            if p < 0:
                return self.recip() ** (-p)
            # binary exponentiation keeps integer powers sign-safe
            result = None
            base = self
            while p:
                if p & 1:
                    result = base if result is None else result * base
                p >>= 1
                if p:
                    base = base * base
            return result
        return self.compose(derivs_pow(self.value, p, self.space.order))

    # -- composition with a univariate function -------------------------------

    def compose(self, derivs):
        """Apply a univariate function given [f, f', ..., f^(order)] at value.

        Taylor composition in the carrier algebra; exact to the truncation
        order for smooth f.
        """
        order = self.space.order
        if len(derivs) < order + 1:
            raise ValueError("need derivatives up to the truncation order")
        if (order <= 3 and self.coef.dtype == np.float64
                and self.coef.flags.c_contiguous):
            from ._kernels import jet_compose
            return Jet(self.space, jet_compose(self.space, self.coef, derivs))
        delta = self.coef.copy()
        delta[0] = 0.0
        delta = Jet(self.space, delta)
        acc = Jet.const(self.space, np.broadcast_to(
            np.asarray(derivs[order] / math.factorial(order), dtype=float),
            self.batch_shape).copy())
        for n in range(order - 1, -1, -1):
            acc = acc * delta
            acc.coef[0] += derivs[n] / math.factorial(n)
        return acc

    # -- elementary functions --------------------------------------------------

    def recip(self):
        return self.compose(derivs_recip(self.value, self.space.order))

    def sqrt(self):
        return self.compose(derivs_sqrt(self.value, self.space.order))

    def exp(self):
        return self.compose(derivs_exp(self.value, self.space.order))

    def log(self):
        return self.compose(derivs_log(self.value, self.space.order))

    def sin(self):
        return self.compose(derivs_sin(self.value, self.space.order))

    def cos(self):
        return self.compose(derivs_cos(self.value, self.space.order))

    def tanh(self):
        return self.compose(derivs_tanh(self.value, self.space.order))

    def erf(self):
        return self.compose(derivs_erf(self.value, self.space.order))

    def sigmoid(self):
        return self.compose(derivs_sigmoid(self.value, self.space.order))

    def abs(self):
        """Piecewise-smooth absolute value.

        The sign is frozen from the value component; exactly at zero the
        positive branch is used, so gradients there follow that branch.
        """
        sgn = np.where(self.value < 0.0, -1.0, 1.0)
        return Jet(self.space, self.coef * sgn)

    def __getitem__(self, key):
        return Jet(self.space, self.coef[(slice(None),) + _as_tuple(key)])

    def __repr__(self):
        return f"Jet({self.space!r}, batch={self.batch_shape})"


def _as_tuple(key):
    return key if isinstance(key, tuple) else (key,)


def stack(jets, axis=0):
    """Stack jets sharing a space along a new batch axis."""
    sp = jets[0].space
    if any(j.space is not sp for j in jets):
        raise ValueError("jets from different spaces")
    return Jet(sp, np.stack([j.coef for j in jets], axis=axis + 1))


def embed(jet, target_space, var_map):
    """Lift a jet into a larger space; var_map[v_src] = v_target.

    Unmapped target variables get zero derivatives (the field is constant
    along them).
    """
    src = jet.space
    coef = np.zeros((target_space.ncomp,) + jet.batch_shape)
    for k, alpha in enumerate(src.mindex):
        tgt_alpha = [0] * target_space.nvars
        for v_src, a in enumerate(alpha):
            tgt_alpha[var_map[v_src]] += a
        tk = target_space.index.get(tuple(tgt_alpha))
        if tk is None:
            raise ValueError("target space order too low for embedding")
        coef[tk] += jet.coef[k]
    return Jet(target_space, coef)
