"""Reverse-mode differentiation over jet-valued forward passes.

The tape records scalar-graph operations whose forward values are either
jets (field-like quantities carrying spatial derivatives) or plain numpy
arrays (anything downstream of a derivative extraction, and the trainable
parameters themselves). Reverse accumulation walks the recorded node list
backwards in creation order, which makes gradient evaluation deterministic
and lets a loss that contains spatial second derivatives be differentiated
with respect to every parameter in one sweep.
"""

from __future__ import annotations

import math

import numpy as np

from . import _kernels
from .jets import (Jet, derivs_erf, derivs_gelu, derivs_sigmoid, derivs_silu,
                   derivs_tanh)


def _sum_to_shape(arr, shape):
    """Undo numpy broadcasting in a backward pass."""
    if arr.shape == tuple(shape):
        return arr
    extra = arr.ndim - len(shape)
    if extra > 0:
        arr = arr.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and arr.shape[i] != 1)
    if axes:
        arr = arr.sum(axis=axes, keepdims=True)
    return arr


class Node:
    """One recorded value; backward closures accumulate into parent grads."""

    __slots__ = ("tape", "value", "parents", "_backward", "grad",
                 "needs_grad")

    def __init__(self, tape, value, parents=(), backward=None,
                 needs_grad=None):
        self.tape = tape
        self.value = value
        self.parents = parents
        self._backward = backward
        self.grad = None
        if needs_grad is None:
            needs_grad = any(p.needs_grad for p in parents)
        self.needs_grad = needs_grad
        tape.nodes.append(self)

    # ------------------------------------------------------------------
    @property
    def _is_jet(self):
        return isinstance(self.value, Jet)

    def _ensure_grad(self):
        if self.grad is None:
            if self._is_jet:
                self.grad = np.zeros_like(self.value.coef)
            else:
                self.grad = np.zeros_like(self.value)
        return self.grad

    def _kernel_grad(self):
        """Gradient buffer for dense kernel writes; True when fresh."""
        if self.grad is None:
            self.grad = np.empty_like(self.value.coef)
            return self.grad, True
        return self.grad, False

    def accum(self, g, own=False):
        """Add a gradient contribution; adopt fresh arrays without copying."""
        if self.grad is None:
            self.grad = g if own else g.copy()
        else:
            self.grad += g

    # -- arithmetic -----------------------------------------------------
    def __add__(self, other):
        if isinstance(other, Node):
            out = Node(self.tape, self.value + other.value, (self, other))
            if self._is_jet:
                def bwd(g):
                    if self.needs_grad:
                        self.accum(g, own=True)
                    if other.needs_grad:
                        other.accum(g)
            else:
                def bwd(g):
                    if self.needs_grad:
                        self.accum(_sum_to_shape(g, self.value.shape))
                    if other.needs_grad:
                        other.accum(_sum_to_shape(g, other.value.shape))
            out._backward = bwd
            return out
        out = Node(self.tape, self.value + other, (self,))

        def bwd(g):
            if self._is_jet:
                self.accum(g, own=True)
            else:
                self.accum(_sum_to_shape(g, self.value.shape))
        out._backward = bwd
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Node(self.tape, -self.value, (self,))

        def bwd(g):
            self.accum(-g, own=True)
        out._backward = bwd
        return out

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, Node):
            return _mul_nodes(self, other)
        return _mul_const(self, other)

    __rmul__ = __mul__

    # -- jet component extraction (jet node -> array node) ---------------
    def value_comp(self):
        jet = self.value
        out = Node(self.tape, jet.coef[0].copy(), (self,))

        def bwd(g):
            self._ensure_grad()
            self.grad[0] += g
        out._backward = bwd
        return out

    def first(self, v):
        jet = self.value
        k = jet.space.seed_comp(v)
        out = Node(self.tape, jet.coef[k].copy(), (self,))

        def bwd(g):
            self._ensure_grad()
            self.grad[k] += g
        out._backward = bwd
        return out

    def deriv(self, alpha):
        jet = self.value
        k = jet.space.index[tuple(alpha)]
        fac = jet.space.factorial[k]
        out = Node(self.tape, jet.coef[k] * fac, (self,))

        def bwd(g):
            self._ensure_grad()
            self.grad[k] += fac * g
        out._backward = bwd
        return out

    def second(self, i, j):
        alpha = [0] * self.value.space.nvars
        alpha[i] += 1
        alpha[j] += 1
        return self.deriv(alpha)

    def lap(self, nspatial=None):
        jet = self.value
        n = jet.space.nvars if nspatial is None else nspatial
        ks = []
        for i in range(n):
            alpha = [0] * jet.space.nvars
            alpha[i] = 2
            ks.append(jet.space.index[tuple(alpha)])
        val = sum(2.0 * jet.coef[k] for k in ks)
        out = Node(self.tape, val, (self,))

        def bwd(g):
            self._ensure_grad()
            for k in ks:
                self.grad[k] += 2.0 * g
        out._backward = bwd
        return out

    def third(self, i, j, k):
        alpha = [0] * self.value.space.nvars
        alpha[i] += 1
        alpha[j] += 1
        alpha[k] += 1
        return self.deriv(alpha)

    def pick(self, idx):
        """Select one trailing feature column of a jet node."""
        jet = self.value
        out = Node(self.tape,
                   Jet(jet.space, np.ascontiguousarray(jet.coef[..., idx])),
                   (self,))

        def bwd(g):
            self._ensure_grad()
            self.grad[..., idx] += g
        out._backward = bwd
        return out


def _mul_nodes(a, b):
    if a._is_jet and b._is_jet:
        sp = a.value.space
        out = Node(a.tape, a.value * b.value, (a, b))
        ac, bc = a.value.coef, b.value.coef

        def bwd(g):
            if a.needs_grad and b.needs_grad:
                ga, init_a = a._kernel_grad()
                gb, init_b = b._kernel_grad()
                _kernels.jet_mul_adjoint(sp, g, ac, bc, ga, gb,
                                         init_a, init_b)
            elif a.needs_grad:
                ga, init = a._kernel_grad()
                _kernels.jet_mul_adjoint_left(sp, g, bc, ga, init)
            elif b.needs_grad:
                gb, init = b._kernel_grad()
                _kernels.jet_mul_adjoint_left(sp, g, ac, gb, init)
        out._backward = bwd
        return out
    if a._is_jet or b._is_jet:
        jet_node, arr_node = (a, b) if a._is_jet else (b, a)
        # array factor is constant along the seeds: scales every coefficient
        out = Node(a.tape, Jet(jet_node.value.space,
                               jet_node.value.coef * arr_node.value), (a, b))
        jc = jet_node.value.coef

        def bwd(g):
            if jet_node.needs_grad:
                jet_node.accum(g * arr_node.value, own=True)
            if arr_node.needs_grad:
                arr_node.accum(_sum_to_shape((g * jc).sum(axis=0),
                                             arr_node.value.shape))
        out._backward = bwd
        return out
    out = Node(a.tape, a.value * b.value, (a, b))

    def bwd(g):
        if a.needs_grad:
            a.accum(_sum_to_shape(g * b.value, a.value.shape))
        if b.needs_grad:
            b.accum(_sum_to_shape(g * a.value, b.value.shape))
    out._backward = bwd
    return out


def _mul_const(a, c):
    if a._is_jet and isinstance(c, Jet):
        sp = a.value.space
        out = Node(a.tape, a.value * c, (a,))
        cc = c.coef

        def bwd(g):
            ga, init = a._kernel_grad()
            _kernels.jet_mul_adjoint_left(sp, g, cc, ga, init)
        out._backward = bwd
        return out
    out = Node(a.tape, a.value * c, (a,))

    def bwd(g):
        if a._is_jet:
            a.accum(g * c, own=True)
        else:
            a.accum(_sum_to_shape(g * c, a.value.shape))
    out._backward = bwd
    return out


class Tape:
    """Ordered record of one loss evaluation.

    Creation order is a topological order, so the backward sweep simply
    walks the list in reverse; accumulation order is therefore fixed and
    runs are bit-reproducible.
    """

    def __init__(self):
        self.nodes = []

    def release(self):
        """Break node reference cycles so buffers free by refcount.

        Training loops build one tape per iteration; releasing it keeps the
        garbage collector from chasing thousands of closure cycles.
        """
        for n in self.nodes:
            n._backward = None
            n.grad = None
            n.parents = ()
        self.nodes.clear()

    def param(self, value):
        return Node(self, np.asarray(value, dtype=float), needs_grad=True)

    def const(self, value):
        if not isinstance(value, Jet):
            value = np.asarray(value, dtype=float)
        return Node(self, value, needs_grad=False)

    def backward(self, loss):
        if loss.tape is not self:
            raise ValueError("loss was not recorded on this tape")
        for n in self.nodes:
            n.grad = None
        if isinstance(loss.value, Jet) or np.shape(loss.value) != ():
            raise ValueError("backward expects a scalar loss node")
        loss.grad = np.ones(())
        idx = self.nodes.index(loss)
        for node in reversed(self.nodes[: idx + 1]):
            if node.grad is not None and node._backward is not None:
                node._backward(node.grad)


# ---------------------------------------------------------------------------
# structured ops
# ---------------------------------------------------------------------------

def affine(z, w, b=None):
    """z @ w.T (+ b) for a jet node z with trailing feature axis.

    w and b are parameter (array) nodes; they are constant along the seeds,
    so the bias only shifts the value coefficient.
    """
    jet = z.value
    wv = w.value
    coef = jet.coef @ wv.T
    if b is not None:
        coef[0] = coef[0] + b.value
    parents = (z, w) if b is None else (z, w, b)
    out = Node(z.tape, Jet(jet.space, coef), parents)
    zc = jet.coef

    def bwd(g):
        if z.needs_grad:
            z.accum(g @ wv, own=True)
        if w.needs_grad:
            gw = g.reshape(-1, g.shape[-1]).T @ zc.reshape(-1, zc.shape[-1])
            w.accum(gw, own=True)
        if b is not None and b.needs_grad:
            g0 = g[0]
            b.accum(g0.reshape(-1, g0.shape[-1]).sum(axis=0), own=True)
    out._backward = bwd
    return out


ACTIVATION_DERIVS = {
    "tanh": derivs_tanh,
    "sigmoid": derivs_sigmoid,
    "erf": derivs_erf,
    "silu": derivs_silu,
    "gelu": derivs_gelu,
}


def compose(z, kind):
    """Univariate function of a jet node via Taylor composition.

    The derivative carrier needed by the backward pass is built during the
    forward pass from one extra derivative order of the primitive.
    """
    jet = z.value
    sp = jet.space
    if sp.order == 2 and kind in _kernels.ACTIVATION_TABLES:
        ds = _kernels.activation_table(kind, jet.value)
    else:
        ds = ACTIVATION_DERIVS[kind](jet.value, sp.order + 1)
    if sp.order in (2, 3):
        fwd_coef, fpc = _kernels.jet_compose_pair(sp, jet.coef, ds)
        fwd = Jet(sp, fwd_coef)
    else:
        fwd = jet.compose(ds[: sp.order + 1])
        fpc = jet.compose(ds[1: sp.order + 2]).coef
    out = Node(z.tape, fwd, (z,))

    def bwd(g):
        gz, init = z._kernel_grad()
        _kernels.jet_mul_adjoint_left(sp, g, fpc, gz, init)
    out._backward = bwd
    return out


def exp_scalar(a):
    """exp of an array-valued node (used for positivity reparameterization)."""
    val = np.exp(a.value)
    out = Node(a.tape, val, (a,))

    def bwd(g):
        a.accum(_sum_to_shape(g * val, a.value.shape))
    out._backward = bwd
    return out


def mean(a, weights=None):
    """Mean of an array node, optionally with fixed per-point weights."""
    n = a.value.size
    if weights is None:
        out = Node(a.tape, np.asarray(a.value.mean()), (a,))

        def bwd(g):
            a.accum(np.broadcast_to(g / n, a.value.shape).copy(), own=True)
    else:
        w = np.asarray(weights, dtype=float)
        out = Node(a.tape, np.asarray((w * a.value).sum() / n), (a,))

        def bwd(g):
            a.accum(g * w / n, own=True)
    out._backward = bwd
    return out


def param_gradient(loss, tape, params):
    """Gradients of a recorded scalar loss with respect to parameter nodes.

    Returns a list of arrays in the order of ``params``. Unused parameters
    get zero gradients.
    """
    tape.backward(loss)
    out = []
    for p in params:
        if p.tape is not tape:
            raise ValueError("parameter was not recorded on this tape")
        out.append(np.zeros_like(p.value) if p.grad is None else p.grad)
    return out


def grad_norm(grads):
    """Euclidean norm of a gradient given as a vector or list of arrays."""
    if isinstance(grads, np.ndarray):
        return float(np.sqrt(np.sum(grads * grads)))
    return float(math.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def flatten(arrays):
    return np.concatenate([np.asarray(a, dtype=float).ravel() for a in arrays])
