"""Loss assembly and training loops for soft and hard boundary enforcement.

The trial function is either the raw network (soft mode, boundary terms
penalized in the loss) or the projected form g_bar + phi * net (hard mode,
Dirichlet data exact by construction). Adaptive loss weights follow the
gradient-norm ratio rule with exponential smoothing and bias correction.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import geometry as geo
from . import network as net
from . import tape as tp
from .jets import Jet, JetSpace, space, space_lap

SPACE0 = space(1, 0)          # value-only carriers (data / Dirichlet points)


class TrainingDiverged(RuntimeError):
    """Raised when the loss stops being finite; carries a snapshot dict."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}


# ---------------------------------------------------------------------------
# problem description
# ---------------------------------------------------------------------------

@dataclass
class PhysicsParams:
    """Flow constants; the learnable one is stored as log-value kappa."""
    reynolds: float = None        # steady cavity form (1/Re viscous factor)
    viscosity: float = None       # unsteady form, m^2/s
    density: float = 1.0
    estimate_mode: str = "fixed"  # "fixed" | "learnable"
    init_guess: float = 1.0       # initial positive value when learnable

    def viscous_factor(self):
        if self.reynolds is not None:
            return 1.0 / self.reynolds
        return self.viscosity


@dataclass
class ProblemSpec:
    domain: geo.DistanceField
    pde_kind: str = "poisson"     # "poisson" | "steady_ns" | "unsteady_ns"
    source: object = None         # f(x, y) for Poisson
    physics: PhysicsParams = None
    n_outputs: int = 1

    def __post_init__(self):
        if self.pde_kind not in ("poisson", "steady_ns", "unsteady_ns"):
            raise ValueError(f"unknown pde_kind {self.pde_kind!r}")
        if not any(p.bc_kind == "dirichlet" for p in self.domain.pieces):
            raise ValueError("problem needs at least one Dirichlet piece")

    @property
    def unsteady(self):
        return self.pde_kind == "unsteady_ns"

    @property
    def n_inputs(self):
        return 3 if self.unsteady else 2

    def dirichlet_values(self, component):
        """Per-piece Dirichlet data for one output component."""
        out = []
        for p in self.domain.dirichlet().pieces:
            v = p.bc_value
            if isinstance(v, (tuple, list)):
                v = v[component]
            out.append(v)
        return out


@dataclass
class CollocationSets:
    pde: np.ndarray                     # (N, 2) or (N, 3) with time column
    dirichlet: np.ndarray = None        # (N, 2|3)
    dirichlet_values: np.ndarray = None  # (N, n_outputs_with_dirichlet)
    neumann: np.ndarray = None
    neumann_normals: np.ndarray = None
    neumann_values: np.ndarray = None
    data: np.ndarray = None
    data_values: np.ndarray = None      # (N, n_observed)
    seed: int = 0


# ---------------------------------------------------------------------------
# adaptive weights (dynamic normalization with bias correction)
# ---------------------------------------------------------------------------

@dataclass
class AdaptiveWeightState:
    beta: float = 0.999
    n: int = 0
    ema: float = 0.0
    corrected: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.beta < 1.0:
            raise ValueError("decay beta must lie in [0, 1)")


def dyn_norm_raw(g_pde_norm, g_data_norm, fallback=0.0):
    """Gradient-norm ratio; falls back to the previous corrected weight."""
    if g_data_norm > 0.0:
        return g_pde_norm / g_data_norm
    if g_pde_norm == 0.0:
        warnings.warn("both gradient norms vanished: weight stagnation")
    return fallback


def dyn_norm_update(state, raw):
    """EMA then bias correction; exact for constant raw streams."""
    n = state.n + 1
    ema = state.beta * state.ema + (1.0 - state.beta) * raw
    corrected = ema / (1.0 - state.beta ** n)
    return replace(state, n=n, ema=ema, corrected=corrected)


def positivity(kappa):
    """Positive reparameterization of a physical constant."""
    return math.exp(kappa) if np.ndim(kappa) == 0 else np.exp(kappa)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(values, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """In-place Adam update on an ordered name -> array mapping."""
    state.t += 1
    t = state.t
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name in values:
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(values[name])
        v = state.v.get(name)
        if v is None:
            v = state.v[name] = np.zeros_like(values[name])
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        values[name] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


# ---------------------------------------------------------------------------
# precomputed trial-function constants
# ---------------------------------------------------------------------------

def _project(jet, target):
    """Quotient projection / embedding between carrier spaces."""
    coef = np.zeros((target.ncomp,) + jet.batch_shape)
    for k, alpha in enumerate(jet.space.mindex):
        tk = target.index.get(alpha if len(alpha) == target.nvars
                              else alpha + (0,) * (target.nvars - len(alpha)))
        if tk is not None:
            coef[tk] = jet.coef[k]
    return Jet(target, coef)


def hard_constants(spec, xy_full, target_space):
    """phi and per-component g_bar jets at collocation points.

    xy_full may carry a trailing time column (ignored by the geometry);
    the jets are lifted into target_space with zero time derivatives.
    """
    pts = xy_full[:, :2]
    ddom = spec.domain.dirichlet()
    phi_full, _ = geo.field_eval(ddom, pts, order=2)
    phi = _project(phi_full, target_space)
    sp2 = phi_full.space
    seeds = Jet.seeds(sp2, pts)
    x, y = seeds[..., 0], seeds[..., 1]
    adfs = [geo.piece_adf(p, x, y) for p in ddom.pieces]
    gbars = []
    for comp in range(spec.n_outputs):
        if spec.pde_kind == "poisson" and comp > 0:
            break
        if spec.pde_kind != "poisson" and comp == spec.n_outputs - 1:
            break  # pressure head is unconstrained
        vals = spec.dirichlet_values(comp)
        g = geo.transfinite_interpolant(ddom.pieces, x, y, values=vals,
                                        adfs=adfs)
        if not isinstance(g, Jet):
            g = Jet.const(sp2, np.broadcast_to(g, pts.shape[0]).copy())
        gbars.append(_project(g, target_space))
    return phi, gbars


def hard_trial_arrays(spec, pts):
    """phi and g_bar plain values for value-only evaluation paths."""
    ddom = spec.domain.dirichlet()
    xy = pts[:, :2]
    phi = geo.field_value(ddom, xy)
    x, y = xy[:, 0], xy[:, 1]
    adfs = [geo.piece_adf(p, x, y) for p in ddom.pieces]
    gbars = []
    for comp in range(spec.n_outputs):
        if spec.pde_kind == "poisson" and comp > 0:
            break
        if spec.pde_kind != "poisson" and comp == spec.n_outputs - 1:
            break
        vals = spec.dirichlet_values(comp)
        g = geo.transfinite_interpolant(ddom.pieces, x, y, values=vals,
                                        adfs=adfs)
        gbars.append(np.broadcast_to(g, xy.shape[0]))
    return phi, gbars


def trial_soft(net_out):
    """Soft imposition: the raw network output is the approximation."""
    return net_out


def trial_hard(net_component, phi_jet, gbar_jet):
    """Hard imposition: g_bar + phi * net, exact on the Dirichlet set."""
    return net_component * phi_jet + gbar_jet


def evaluate_trial(spec, params, pts, hard, kind=None):
    """Plain-array trial evaluation at points (for metrics and reports)."""
    out = net.forward(params, pts)
    if not hard:
        return out
    phi, gbars = hard_trial_arrays(spec, pts)
    out = out.copy()
    for comp, g in enumerate(gbars):
        out[:, comp] = g + phi * out[:, comp]
    return out


# ---------------------------------------------------------------------------
# loss terms
# ---------------------------------------------------------------------------

def loss_pde(trial_node, f_values, weights=None):
    """Mean squared Poisson residual -lap(u) - f over collocation points."""
    r = -trial_node.lap(nspatial=2) - f_values
    return tp.mean(r * r, weights=weights)


def loss_divergence(u_node, v_node, weights=None):
    d = u_node.first(0) + v_node.first(1)
    return tp.mean(d * d, weights=weights)


def loss_momentum(u_node, v_node, p_node, visc, rho=1.0, unsteady=False,
                  weights=None):
    """Mean squared residual of both momentum components.

    visc is a float (fixed) or an array node (positivity-reparameterized
    learnable viscosity).
    """
    uu, vv = u_node.value_comp(), v_node.value_comp()
    ru = uu * u_node.first(0) + vv * u_node.first(1)
    rv = uu * v_node.first(0) + vv * v_node.first(1)
    if unsteady:
        ru = u_node.first(2) + ru
        rv = v_node.first(2) + rv
    ru = ru + p_node.first(0) * (1.0 / rho)
    rv = rv + p_node.first(1) * (1.0 / rho)
    lap_u = u_node.lap(nspatial=2)
    lap_v = v_node.lap(nspatial=2)
    if isinstance(visc, tp.Node):
        ru = ru - visc * lap_u
        rv = rv - visc * lap_v
    else:
        ru = ru - float(visc) * lap_u
        rv = rv - float(visc) * lap_v
    return tp.mean(ru * ru, weights=weights) + tp.mean(rv * rv,
                                                       weights=weights)


def loss_data(trial_value_nodes, observed, weights=None):
    """Mean squared misfit; observed is (N, ncomp), one node per component."""
    total = None
    for comp, node in enumerate(trial_value_nodes):
        d = node - observed[:, comp]
        term = tp.mean(d * d, weights=weights)
        total = term if total is None else total + term
    return total


def loss_dirichlet(value_nodes, g_values, weights=None):
    total = None
    for comp, node in enumerate(value_nodes):
        d = node - g_values[:, comp]
        term = tp.mean(d * d, weights=weights)
        total = term if total is None else total + term
    return total


def loss_neumann(grad_nodes, normals, g_values, weights=None):
    """Mean squared normal-derivative misfit, summed over components."""
    total = None
    for comp, node in enumerate(grad_nodes):
        flux = node.first(0) * normals[:, 0] + node.first(1) * normals[:, 1]
        d = flux - g_values[:, comp]
        term = tp.mean(d * d, weights=weights)
        total = term if total is None else total + term
    return total


def gpinn_loss(trial_node, f_grad, weights=None):
    """Mean squared gradient of the Poisson residual (order-3 carriers)."""
    sp = trial_node.value.space
    if sp.order < 3:
        raise ValueError("gradient enhancement needs third-order carriers")
    rx = -(trial_node.third(0, 0, 0) + trial_node.third(0, 1, 1)) \
        - f_grad[:, 0]
    ry = -(trial_node.third(0, 0, 1) + trial_node.third(1, 1, 1)) \
        - f_grad[:, 1]
    return tp.mean(rx * rx, weights=weights) + tp.mean(ry * ry,
                                                       weights=weights)


# ---------------------------------------------------------------------------
# self-adaptive per-point weights
# ---------------------------------------------------------------------------

@dataclass
class SAWeights:
    """Per-point multipliers, updated by gradient ascent on the mask."""
    pde: np.ndarray = None
    dbc: np.ndarray = None
    nbc: np.ndarray = None
    lr_scale: float = 1.0          # eta_lambda = lr_scale * eta_theta
    frozen: bool = False

    @staticmethod
    def mask(lam):
        return np.maximum(0.0, lam) ** 2

    def ascend(self, name, residual_sq, lr_theta):
        """lambda <- lambda + eta_lambda * d/dlambda mean(m(lambda) r^2)."""
        if self.frozen:
            return
        lam = getattr(self, name)
        grad = 2.0 * np.maximum(0.0, lam) * residual_sq / residual_sq.size
        lam += self.lr_scale * lr_theta * grad


def sa_pinn_step(values, grads, adam_state, lr, sa, residuals):
    """Descent on the network parameters, ascent on the point weights."""
    adam_step(values, grads, adam_state, lr)
    for name, rsq in residuals.items():
        sa.ascend(name, rsq, lr)
    return adam_state, sa


# ---------------------------------------------------------------------------
# training driver
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    iterations: int = 5000
    lr: float = 1e-3
    lr_decay: float = 1.0          # multiplicative factor
    lr_decay_every: int = 2000
    hard: bool = True
    weighting: str = "fixed"       # "fixed" | "dyn_norm"
    beta: float = 0.999
    lambda_bc: float = 1.0
    lambda_data: float = 1.0
    lambda_div: float = 1.0
    extension: str = "none"        # "none" | "llaaf" | "gpinn" | "sapinn"
    ext_weight: float = 1.0        # lambda_SR / lambda_GE / c_SA
    sapinn_freeze_half: bool = False
    eval_every: int = 1
    record_every: int = 1


@dataclass
class TrainReport:
    iters: list = field(default_factory=list)
    loss_pde: list = field(default_factory=list)
    loss_bc: list = field(default_factory=list)
    loss_data: list = field(default_factory=list)
    loss_div: list = field(default_factory=list)
    lambda_data: list = field(default_factory=list)
    lambda_div: list = field(default_factory=list)
    rel_l2: list = field(default_factory=list)
    param_estimate: list = field(default_factory=list)
    final_params: object = None
    final_kappa: float = None

    COLUMNS = ("iter", "loss_pde", "loss_bc", "loss_data", "loss_div",
               "lambda_data", "lambda_div", "rel_l2", "param_estimate")

    def append(self, it, lp, lbc, ld, ldiv, lam_d, lam_div, rl2, est):
        self.iters.append(it)
        self.loss_pde.append(lp)
        self.loss_bc.append(lbc)
        self.loss_data.append(ld)
        self.loss_div.append(ldiv)
        self.lambda_data.append(lam_d)
        self.lambda_div.append(lam_div)
        self.rel_l2.append(rl2)
        self.param_estimate.append(est)

    def rows(self):
        for k in range(len(self.iters)):
            yield (self.iters[k], self.loss_pde[k], self.loss_bc[k],
                   self.loss_data[k], self.loss_div[k], self.lambda_data[k],
                   self.lambda_div[k], self.rel_l2[k],
                   self.param_estimate[k])

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for row in self.rows():
                w.writerow([row[0]] + [f"{v:.12g}" for v in row[1:]])
        return path


def _trainables(params, kappa=None):
    values = {}
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        values[f"w{i}"] = w
        values[f"b{i}"] = b
    for i, s in enumerate(params.slopes):
        values[f"s{i}"] = s
    if kappa is not None:
        values["kappa"] = kappa
    return values


def train(spec, colloc, cfg, net_cfg=None, params=None, evaluator=None,
          reference_scale=None):
    """Run one training job; returns a TrainReport.

    evaluator(params, kappa) -> (rel_l2, param_estimate) is called every
    cfg.eval_every iterations; its last value is carried in between.
    """
    from ._kernels import tune_allocator
    tune_allocator()
    if params is None:
        nc = net_cfg or net.NetworkConfig(inputs=spec.n_inputs,
                                          outputs=spec.n_outputs)
        params = net.init_glorot(nc)
    ncfg = params.config
    is_flow = spec.pde_kind in ("steady_ns", "unsteady_ns")
    learnable = (spec.physics is not None
                 and spec.physics.estimate_mode == "learnable")
    kappa = np.array(math.log(spec.physics.init_guess)) if learnable else None
    values = _trainables(params, kappa)
    adam = AdamState()
    w_data = AdaptiveWeightState(beta=cfg.beta)
    w_div = AdaptiveWeightState(beta=cfg.beta)
    w_bc = AdaptiveWeightState(beta=cfg.beta)
    report = TrainReport()

    setup = _prepare_constants(spec, colloc, cfg)
    sa = None
    if cfg.extension == "sapinn":
        sa = SAWeights(
            pde=np.ones(colloc.pde.shape[0]),
            dbc=(np.ones(colloc.dirichlet.shape[0])
                 if colloc.dirichlet is not None else None),
            nbc=(np.ones(colloc.neumann.shape[0])
                 if colloc.neumann is not None else None),
            lr_scale=cfg.ext_weight)

    last_eval = (float("nan"), float("nan"))
    dyn = cfg.weighting == "dyn_norm"
    lam_data = cfg.lambda_data
    lam_div = cfg.lambda_div
    lam_bc = cfg.lambda_bc
    for it in range(cfg.iterations):
        lr = cfg.lr * (cfg.lr_decay ** (it // cfg.lr_decay_every)
                       if cfg.lr_decay != 1.0 else 1.0)
        if sa is not None and cfg.sapinn_freeze_half:
            sa.frozen = it >= cfg.iterations // 2
        tape = tp.Tape()
        nodes = net.register_params(tape, params)
        kap_node = tape.param(kappa) if learnable else None
        losses, residuals = _assemble(spec, colloc, cfg, setup, tape, nodes,
                                      kap_node, ncfg, sa)

        grads = {}
        norms = {}
        names = list(values)
        for term in ("pde", "div", "data", "bc"):
            if term not in losses:
                continue
            if not dyn and term != "pde":
                continue
            gs = tp.param_gradient(losses[term], tape,
                                   [nodes[n] if n != "kappa" else kap_node
                                    for n in names])
            grads[term] = dict(zip(names, gs))
            norms[term] = tp.grad_norm(gs)

        loss_vals = {k: float(v.value) for k, v in losses.items()}
        if not all(np.isfinite(v) for v in loss_vals.values()):
            tape.release()
            raise TrainingDiverged(
                f"non-finite loss at iteration {it}",
                snapshot={"iteration": it, "losses": loss_vals,
                          "lambda_data": lam_data, "lambda_div": lam_div})

        if dyn:
            if "data" in losses:
                raw = dyn_norm_raw(norms["pde"], norms["data"],
                                   fallback=w_data.corrected)
                w_data = dyn_norm_update(w_data, raw)
                lam_data = w_data.corrected
            if "div" in losses:
                raw = dyn_norm_raw(norms["pde"], norms["div"],
                                   fallback=w_div.corrected)
                w_div = dyn_norm_update(w_div, raw)
                lam_div = w_div.corrected
            if "bc" in losses and not cfg.hard:
                raw = dyn_norm_raw(norms["pde"], norms["bc"],
                                   fallback=w_bc.corrected)
                w_bc = dyn_norm_update(w_bc, raw)
                lam_bc = w_bc.corrected
            total_grads = {}
            for n in names:
                g = grads["pde"][n].copy()
                if "div" in grads:
                    g += lam_div * grads["div"][n]
                if "data" in grads:
                    g += lam_data * grads["data"][n]
                if "bc" in grads:
                    g += lam_bc * grads["bc"][n]
                total_grads[n] = g
        else:
            total = losses["pde"]
            if "div" in losses:
                total = total + lam_div * losses["div"]
            if "data" in losses:
                total = total + lam_data * losses["data"]
            if "bc" in losses:
                total = total + lam_bc * losses["bc"]
            gs = tp.param_gradient(total, tape,
                                   [nodes[n] if n != "kappa" else kap_node
                                    for n in names])
            total_grads = dict(zip(names, gs))

        res_sq = {k: v for k, v in residuals.items()} if sa is not None else {}
        tape.release()

        if sa is not None:
            sa_pinn_step(values, total_grads, adam, lr, sa, res_sq)
        else:
            adam_step(values, total_grads, adam, lr)

        if evaluator is not None and (it % cfg.eval_every == 0
                                      or it == cfg.iterations - 1):
            last_eval = evaluator(params, kappa)
        if it % cfg.record_every == 0 or it == cfg.iterations - 1:
            report.append(it, loss_vals.get("pde", float("nan")),
                          loss_vals.get("bc", 0.0),
                          loss_vals.get("data", 0.0),
                          loss_vals.get("div", 0.0),
                          lam_data if "data" in losses else 0.0,
                          lam_div if "div" in losses else 0.0,
                          last_eval[0], last_eval[1])

    report.final_params = params
    report.final_kappa = None if kappa is None else float(kappa)
    return report


def _prepare_constants(spec, colloc, cfg):
    """Geometry and source constants reused across iterations."""
    setup = {}
    lap_space = space_lap(2, with_time=spec.unsteady)
    setup["lap_space"] = lap_space
    setup["pde_seeds"] = Jet.seeds(lap_space, colloc.pde)
    if spec.pde_kind == "poisson" and spec.source is not None:
        setup["f"] = np.asarray(spec.source(colloc.pde[:, 0],
                                            colloc.pde[:, 1]), dtype=float)
        setup["f"] = np.broadcast_to(setup["f"], colloc.pde.shape[:1]).copy()
    if cfg.hard:
        setup["phi"], setup["gbars"] = hard_constants(spec, colloc.pde,
                                                      lap_space)
        if colloc.data is not None:
            phi_d, gbars_d = hard_trial_arrays(spec, colloc.data)
            setup["phi_data"] = phi_d
            setup["gbars_data"] = gbars_d
    if colloc.neumann is not None and len(colloc.neumann):
        grad_space = space(2, 1)
        setup["grad_space"] = grad_space
        setup["nbc_seeds"] = Jet.seeds(grad_space, colloc.neumann)
        if cfg.hard:
            # hard trial still needs first derivatives of phi and g_bar
            ddom = spec.domain.dirichlet()
            phi_full, _ = geo.field_eval(ddom, colloc.neumann, order=1)
            setup["phi_nbc"] = phi_full
            seeds = Jet.seeds(grad_space, colloc.neumann)
            x, y = seeds[..., 0], seeds[..., 1]
            adfs = [geo.piece_adf(p, x, y) for p in ddom.pieces]
            gb = []
            for comp in range(1 if spec.pde_kind == "poisson"
                              else spec.n_outputs - 1):
                vals = spec.dirichlet_values(comp)
                g = geo.transfinite_interpolant(ddom.pieces, x, y,
                                                values=vals, adfs=adfs)
                if not isinstance(g, Jet):
                    g = Jet.const(grad_space,
                                  np.broadcast_to(
                                      g, colloc.neumann.shape[:1]).copy())
                gb.append(g)
            setup["gbars_nbc"] = gb
    if cfg.extension == "gpinn":
        if spec.pde_kind != "poisson":
            raise ValueError("gradient enhancement implemented for Poisson")
        sp3 = space(2, 3)
        setup["gpinn_space"] = sp3
        setup["gpinn_seeds"] = Jet.seeds(sp3, colloc.pde)
        fx, fy = _source_gradient(spec.source, colloc.pde)
        setup["f_grad"] = np.stack([fx, fy], axis=-1)
        if cfg.hard:
            ddom = spec.domain.dirichlet()
            phi_full, _ = geo.field_eval(ddom, colloc.pde[:, :2], order=3)
            setup["phi3"] = phi_full
            seeds = Jet.seeds(sp3, colloc.pde[:, :2])
            x, y = seeds[..., 0], seeds[..., 1]
            adfs = [geo.piece_adf(p, x, y) for p in ddom.pieces]
            vals = spec.dirichlet_values(0)
            g = geo.transfinite_interpolant(ddom.pieces, x, y, values=vals,
                                            adfs=adfs)
            if not isinstance(g, Jet):
                g = Jet.const(sp3, np.broadcast_to(
                    g, colloc.pde.shape[:1]).copy())
            setup["gbar3"] = g
    return setup


def _source_gradient(source, pts):
    sp = space(2, 1)
    seeds = Jet.seeds(sp, pts[:, :2])
    f = source(seeds[..., 0], seeds[..., 1])
    if isinstance(f, Jet):
        return f.first(0), f.first(1)
    z = np.zeros(pts.shape[0])
    return z, z


def _hard_components(out_node, setup, ncomp):
    """Apply g_bar + phi * u_hat per constrained component."""
    phi = setup["phi"]
    gbars = setup["gbars"]
    comps = []
    for c in range(ncomp):
        raw = out_node.pick(c)
        if c < len(gbars):
            comps.append(raw * phi + gbars[c])
        else:
            comps.append(raw)
    return comps


def _assemble(spec, colloc, cfg, setup, tape, nodes, kap_node, ncfg, sa):
    """Build the loss nodes for one iteration; returns (losses, residuals)."""
    losses = {}
    residuals = {}
    w_pde = SAWeights.mask(sa.pde) if sa is not None else None

    x_pde = tape.const(setup["pde_seeds"])
    out = net.forward_on_tape(tape, nodes, x_pde, ncfg)

    if spec.pde_kind == "poisson":
        if cfg.hard:
            u = _hard_components(out, setup, 1)[0]
        else:
            u = out.pick(0)
        r = -u.lap(nspatial=2) - setup["f"]
        losses["pde"] = tp.mean(r * r, weights=w_pde)
        if sa is not None:
            residuals["pde"] = r.value ** 2
        if cfg.extension == "gpinn":
            x3 = tape.const(setup["gpinn_seeds"])
            out3 = net.forward_on_tape(tape, nodes, x3, ncfg)
            if cfg.hard:
                u3 = out3.pick(0) * setup["phi3"] + setup["gbar3"]
            else:
                u3 = out3.pick(0)
            losses["pde"] = losses["pde"] + cfg.ext_weight * gpinn_loss(
                u3, setup["f_grad"])
    else:
        ncomp = spec.n_outputs
        if cfg.hard:
            comps = _hard_components(out, setup, ncomp)
        else:
            comps = [out.pick(c) for c in range(ncomp)]
        u, v, p = comps[0], comps[1], comps[2]
        visc = None
        if kap_node is not None:
            visc = tp.exp_scalar(kap_node)
        else:
            visc = spec.physics.viscous_factor()
        rho = spec.physics.density if spec.physics else 1.0
        losses["pde"] = loss_momentum(u, v, p, visc, rho=rho,
                                      unsteady=spec.unsteady, weights=w_pde)
        losses["div"] = loss_divergence(u, v)

    # observation misfit
    if colloc.data is not None and len(colloc.data):
        xd = tape.const(Jet.const(SPACE0, colloc.data))
        out_d = net.forward_on_tape(tape, nodes, xd, ncfg)
        vals = []
        nobs = colloc.data_values.shape[1]
        for c in range(nobs):
            node = out_d.pick(c).value_comp()
            if cfg.hard and c < len(setup.get("gbars_data", [])):
                node = node * setup["phi_data"] + setup["gbars_data"][c]
            vals.append(node)
        losses["data"] = loss_data(vals, colloc.data_values)

    # boundary penalties
    bc_terms = []
    if not cfg.hard and colloc.dirichlet is not None and len(colloc.dirichlet):
        xb = tape.const(Jet.const(SPACE0, colloc.dirichlet))
        out_b = net.forward_on_tape(tape, nodes, xb, ncfg)
        vals = [out_b.pick(c).value_comp()
                for c in range(colloc.dirichlet_values.shape[1])]
        w_dbc = SAWeights.mask(sa.dbc) if sa is not None else None
        term = loss_dirichlet(vals, colloc.dirichlet_values, weights=w_dbc)
        bc_terms.append(term)
        if sa is not None:
            dsq = sum((v.value - colloc.dirichlet_values[:, c]) ** 2
                      for c, v in enumerate(vals))
            residuals["dbc"] = dsq
    if colloc.neumann is not None and len(colloc.neumann):
        xn = tape.const(setup["nbc_seeds"])
        out_n = net.forward_on_tape(tape, nodes, xn, ncfg)
        ncomp_n = colloc.neumann_values.shape[1]
        grads_n = []
        for c in range(ncomp_n):
            node = out_n.pick(c)
            if cfg.hard and c < len(setup.get("gbars_nbc", [])):
                node = node * setup["phi_nbc"] + setup["gbars_nbc"][c]
            grads_n.append(node)
        w_nbc = SAWeights.mask(sa.nbc) if sa is not None else None
        term = loss_neumann(grads_n, colloc.neumann_normals,
                            colloc.neumann_values, weights=w_nbc)
        bc_terms.append(term)
        if sa is not None:
            fsq = 0.0
            for c, node in enumerate(grads_n):
                flux = (node.value.coef[node.value.space.seed_comp(0)]
                        * colloc.neumann_normals[:, 0]
                        + node.value.coef[node.value.space.seed_comp(1)]
                        * colloc.neumann_normals[:, 1])
                fsq = fsq + (flux - colloc.neumann_values[:, c]) ** 2
            residuals["nbc"] = fsq
    if bc_terms:
        total_bc = bc_terms[0]
        for t in bc_terms[1:]:
            total_bc = total_bc + t
        losses["bc"] = total_bc

    if cfg.extension == "llaaf":
        losses["pde"] = losses["pde"] + cfg.ext_weight * \
            net.slope_recovery_on_tape(tape, nodes, ncfg)

    return losses, residuals
