"""Named benchmark problems: geometry, data, references, and evaluators.

Each builder returns a ProblemSpec plus whatever reference information the
experiment harness needs (grids, exact solutions, observation pools).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import geometry as geo
from . import network as net
from . import refsolvers as rs
from . import training as tr
from .ops import cos, sin, sqrt, value_of


def poisson_source(x, y):
    return sin(2.0 * math.pi * (x + y))


def top_dirichlet(x, y):
    return sin(math.pi * x)


def _square_mixed_pieces(neumann_value):
    df = geo.build_named_domain("square")
    bottom, right, top, left = df.pieces
    pieces = (
        replace(bottom, bc_kind="neumann", bc_value=float(neumann_value)),
        replace(right, bc_value=0.0),
        replace(top, bc_value=top_dirichlet),
        replace(left, bc_value=0.0),
    )
    return df.with_pieces(pieces)


def annulus_exact(x, y, c1=1.0, c2=2.0):
    """Manufactured annulus solution, written without atan2 for c2 = 2."""
    if c2 != 2.0:
        raise ValueError("algebraic form implemented for c2 = 2")
    r2 = x * x + y * y
    r = sqrt(r2)
    return cos(2.0 * math.pi * c1 * r) * (2.0 * x * y / r2)


def annulus_source(x, y, c1=1.0, c2=2.0):
    r2 = x * x + y * y
    r = sqrt(r2)
    w = 2.0 * math.pi * c1
    ang = 2.0 * x * y / r2           # sin(c2 * theta) for c2 = 2
    return (w / r) * sin(w * r) * ang \
        + (w * w + (c2 / r) ** 2) * cos(w * r) * ang


@dataclass
class BuiltProblem:
    spec: tr.ProblemSpec
    bounds: tuple                      # ((x0,x1),(y0,y1))
    eval_points: np.ndarray            # where rel_l2 is measured
    eval_reference: np.ndarray         # reference values there (flat or (N,k))
    observation_pool: tuple = None     # (points, values) for inverse draws
    time_window: float = 0.0           # unsteady problems


def build_poisson(neumann_value=0.0, m=1, ref_cells=100):
    """Mixed-BC Poisson on the unit square with an FDM reference."""
    domain = _square_mixed_pieces(neumann_value)
    domain = replace(domain, m=m)
    spec = tr.ProblemSpec(domain=domain, pde_kind="poisson",
                          source=poisson_source)

    def g_d(x, y):
        return math.sin(math.pi * x) if y >= 1.0 - 1e-12 else 0.0

    grid, u_ref = rs.fdm_poisson_mixed(
        ref_cells, lambda x, y: float(poisson_source(x, y)), g_d,
        lambda x, y: float(neumann_value))
    X, Y = grid.nodes()
    pts = np.stack([X.ravel(), Y.ravel()], axis=-1)
    return BuiltProblem(spec=spec, bounds=((0.0, 1.0), (0.0, 1.0)),
                        eval_points=pts, eval_reference=u_ref.ravel())


def build_annulus(m=1, n_eval=4096, eval_seed=4242):
    """Dirichlet Poisson on an annulus with a manufactured reference."""
    domain = geo.build_named_domain("annulus", {"m": m})
    pieces = tuple(replace(p, bc_value=annulus_exact)
                   for p in domain.pieces)
    domain = domain.with_pieces(pieces)
    spec = tr.ProblemSpec(domain=domain, pde_kind="poisson",
                          source=annulus_source)
    pts = sample_uniform(domain, n_eval, eval_seed,
                         bounds=((-1, 1), (-1, 1)))
    ref = value_of(annulus_exact(pts[:, 0], pts[:, 1]))
    return BuiltProblem(spec=spec, bounds=((-1.0, 1.0), (-1.0, 1.0)),
                        eval_points=pts, eval_reference=ref)


def build_cavity(reynolds=100.0, ref_cells=64, estimate=False,
                 init_guess=1.0, solver_tol=1e-8):
    """Shear-driven cavity; FDM reference doubles as observation pool."""
    df = geo.build_named_domain("square")
    bottom, right, top, left = df.pieces
    wall = (0.0, 0.0)
    pieces = (replace(bottom, bc_value=wall),
              replace(right, bc_value=wall),
              replace(top, bc_value=(1.0, 0.0)),
              replace(left, bc_value=wall))
    domain = df.with_pieces(pieces)
    physics = tr.PhysicsParams(
        reynolds=reynolds,
        estimate_mode="learnable" if estimate else "fixed",
        init_guess=init_guess)
    spec = tr.ProblemSpec(domain=domain, pde_kind="steady_ns",
                          physics=physics, n_outputs=3)
    grid, u, v, p = rs.fdm_cavity(ref_cells, reynolds, tol=solver_tol)
    X, Y = grid.nodes()
    pts = np.stack([X.ravel(), Y.ravel()], axis=-1)
    vals = np.stack([u.ravel(), v.ravel()], axis=-1)
    interior = ((pts[:, 0] > 0) & (pts[:, 0] < 1)
                & (pts[:, 1] > 0) & (pts[:, 1] < 1))
    return BuiltProblem(spec=spec, bounds=((0.0, 1.0), (0.0, 1.0)),
                        eval_points=pts, eval_reference=vals,
                        observation_pool=(pts[interior], vals[interior]))


def _inlet_profile(height):
    def profile(x, y):
        return 4.0 * y * (height - y) / height ** 2
    return profile


def build_obstacle(obstacle="square", viscosity=2e-3, density=1.0,
                   width=4.0, height=1.0, obstacle_size=0.2,
                   obstacle_center=(1.0, 0.5), estimate=True,
                   init_guess=1.0, ref_cells_per_unit=40, spin_up=4.0,
                   window=2.0, ref_path=None, max_eval=20000,
                   eval_seed=777):
    """Unsteady flow around an obstacle; square uses the built-in FDM
    reference, heart ingests an external CSV."""
    df = geo.build_named_domain(
        "rect_with_obstacle",
        {"width": width, "height": height, "obstacle": obstacle,
         "obstacle_size": obstacle_size, "obstacle_center": obstacle_center})
    outerct = 4
    wall = (0.0, 0.0)
    inlet = (_inlet_profile(height), 0.0)
    new_pieces = []
    for k, p in enumerate(df.pieces):
        if k == 0:          # bottom wall
            new_pieces.append(replace(p, bc_value=wall))
        elif k == 1:        # outlet: zero-gradient on both components
            new_pieces.append(replace(p, bc_kind="neumann",
                                      bc_value=(0.0, 0.0)))
        elif k == 2:        # top wall
            new_pieces.append(replace(p, bc_value=wall))
        elif k == 3:        # inlet
            new_pieces.append(replace(p, bc_value=inlet))
        else:               # obstacle: no slip
            new_pieces.append(replace(p, bc_value=wall))
    domain = df.with_pieces(tuple(new_pieces))
    physics = tr.PhysicsParams(
        viscosity=viscosity, density=density,
        estimate_mode="learnable" if estimate else "fixed",
        init_guess=init_guess)
    spec = tr.ProblemSpec(domain=domain, pde_kind="unsteady_ns",
                          physics=physics, n_outputs=3)
    bounds = ((0.0, width), (0.0, height))

    if obstacle == "square" and ref_path is None:
        times, xs, ys, snaps = rs.fdm_channel_obstacle(
            n_per_unit=ref_cells_per_unit, width=width, height=height,
            obstacle_center=obstacle_center, obstacle_size=obstacle_size,
            viscosity=viscosity, spin_up=spin_up, window=window)
        X, Y = np.meshgrid(xs, ys)
        pts_list, val_list = [], []
        for t, (u, v, p) in zip(times, snaps):
            pts_list.append(np.stack([X.ravel(), Y.ravel(),
                                      np.full(X.size, t)], axis=-1))
            val_list.append(np.stack([u.ravel(), v.ravel()], axis=-1))
        pts = np.concatenate(pts_list)
        vals = np.concatenate(val_list)
    else:
        if ref_path is None:
            raise ValueError("heart obstacle needs an ingested reference "
                             "(ref_path)")
        pts, fields, header = rs.ingest_reference_csv(ref_path,
                                                      bounds=bounds)
        if pts.shape[1] != 3:
            raise rs.IngestError("unsteady reference needs a t column")
        vals = fields[:, :2]
        times = np.unique(pts[:, 2])
    # keep reference points strictly inside the flow region
    inside = geo.field_value(domain, pts[:, :2]) > 1e-9
    pts, vals = pts[inside], vals[inside]
    window_t = float(pts[:, 2].max())
    if len(pts) > max_eval:
        rng = np.random.default_rng(eval_seed)
        pick = rng.choice(len(pts), size=max_eval, replace=False)
        pick.sort()
        eval_pts, eval_vals = pts[pick], vals[pick]
    else:
        eval_pts, eval_vals = pts, vals
    return BuiltProblem(spec=spec, bounds=bounds, eval_points=eval_pts,
                        eval_reference=eval_vals,
                        observation_pool=(pts, vals), time_window=window_t)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def sample_uniform(domain, n, seed, bounds, time_window=0.0,
                   min_acceptance=1e-3):
    """Uniform interior points by rejection from the bounding box.

    Appends a uniform time column when time_window > 0.
    """
    rng = np.random.default_rng(seed)
    (x0, x1), (y0, y1) = bounds
    kept = []
    total_drawn = 0
    total_kept = 0
    while total_kept < n:
        batch = max(4 * (n - total_kept), 256)
        cand = np.stack([rng.uniform(x0, x1, batch),
                         rng.uniform(y0, y1, batch)], axis=-1)
        inside = geo.field_value(domain, cand) > 0.0
        total_drawn += batch
        picked = cand[inside]
        total_kept += len(picked)
        kept.append(picked)
        if total_drawn > 64 * max(n, 256) and \
                total_kept / total_drawn < min_acceptance:
            raise ValueError("rejection sampling acceptance rate below "
                             f"{min_acceptance}")
    pts = np.concatenate(kept)[:n]
    if time_window > 0.0:
        t = rng.uniform(0.0, time_window, n)
        pts = np.concatenate([pts, t[:, None]], axis=-1)
    return pts


def build_collocation(problem, seed, n_pde, n_dbc=0, n_nbc=0, n_data=0,
                      soft=False, noise_sigma=0.0, n_initial=0):
    """Seeded collocation sets for one training run."""
    spec = problem.spec
    tw = problem.time_window
    rng = np.random.default_rng(seed + 1_000_003)
    pde = sample_uniform(spec.domain, n_pde, seed, problem.bounds,
                         time_window=tw)
    colloc = tr.CollocationSets(pde=pde, seed=seed)

    d_pieces = [p for p in spec.domain.pieces if p.bc_kind == "dirichlet"]
    n_pieces = [p for p in spec.domain.pieces if p.bc_kind == "neumann"]
    ncomp_bc = 1 if spec.pde_kind == "poisson" else spec.n_outputs - 1

    if soft and n_dbc > 0:
        pts, _, pidx = geo.sample_boundary(d_pieces, n_dbc,
                                           int(rng.integers(2**31)))
        vals = np.zeros((len(pts), ncomp_bc))
        for k, p in enumerate(d_pieces):
            sel = pidx == k
            for c in range(ncomp_bc):
                v = p.bc_value
                if isinstance(v, (tuple, list)):
                    v = v[c]
                if callable(v):
                    vals[sel, c] = v(pts[sel, 0], pts[sel, 1])
                else:
                    vals[sel, c] = v
        if tw > 0.0:
            tcol = rng.uniform(0.0, tw, len(pts))[:, None]
            pts = np.concatenate([pts, tcol], axis=-1)
        colloc.dirichlet = pts
        colloc.dirichlet_values = vals
    if n_nbc > 0 and n_pieces:
        pts, normals, pidx = geo.sample_boundary(n_pieces, n_nbc,
                                                 int(rng.integers(2**31)))
        vals = np.zeros((len(pts), ncomp_bc))
        for k, p in enumerate(n_pieces):
            sel = pidx == k
            for c in range(ncomp_bc):
                v = p.bc_value
                if isinstance(v, (tuple, list)):
                    v = v[c]
                if callable(v):
                    vals[sel, c] = v(pts[sel, 0], pts[sel, 1])
                else:
                    vals[sel, c] = v
        if tw > 0.0:
            tcol = rng.uniform(0.0, tw, len(pts))[:, None]
            pts = np.concatenate([pts, tcol], axis=-1)
        colloc.neumann = pts
        colloc.neumann_normals = -normals     # outward normal
        colloc.neumann_values = vals
    if n_data > 0:
        pool_pts, pool_vals = problem.observation_pool
        pts, obs = rs.sample_observations(pool_pts, pool_vals, n_data,
                                          seed + 7_777, noise_sigma)
        if n_initial > 0 and tw > 0.0:
            t0 = pool_pts[:, 2] == pool_pts[:, 2].min()
            ipts, iobs = rs.sample_observations(
                pool_pts[t0], pool_vals[t0], min(n_initial, int(t0.sum())),
                seed + 9_999, noise_sigma)
            pts = np.concatenate([pts, ipts])
            obs = np.concatenate([obs, iobs])
        colloc.data = pts
        colloc.data_values = obs
    return colloc


# ---------------------------------------------------------------------------
# evaluators
# ---------------------------------------------------------------------------

def rel_l2(approx, reference):
    """Relative L2 norm of the misfit over a common evaluation set."""
    approx = np.asarray(approx, dtype=float).ravel()
    reference = np.asarray(reference, dtype=float).ravel()
    denom = float(np.sqrt(np.sum(reference**2)))
    if denom == 0.0:
        raise ValueError("reference field has zero norm")
    return float(np.sqrt(np.sum((approx - reference) ** 2)) / denom)


def make_evaluator(problem, hard):
    """rel-L2 (+ physical parameter estimate) as a training callback."""
    spec = problem.spec
    pts = problem.eval_points
    ref = problem.eval_reference
    if hard:
        phi, gbars = tr.hard_trial_arrays(spec, pts)

    def evaluate(params, kappa):
        out = np.asarray(net.forward(params, pts))
        if hard:
            for c in range(len(gbars)):
                out[:, c] = gbars[c] + phi * out[:, c]
        if spec.pde_kind == "poisson":
            err = rel_l2(out[:, 0], ref)
        else:
            err = rel_l2(out[:, :2], ref)
        if kappa is None:
            est = float("nan")
        else:
            nu = math.exp(float(kappa))
            est = 1.0 / nu if spec.physics.reynolds is not None else nu
        return err, est

    return evaluate
