"""Finite-difference reference solvers and reference-field ingestion.

Poisson with mixed boundary conditions on the unit square (direct sparse
solve, second order) and lid-driven cavity via Chorin projection on a
node-velocity / cell-pressure staggered layout with third-order upwind
advection. A channel-with-obstacle variant of the projection solver
produces desk-scale unsteady reference data.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu, spsolve


@dataclass
class Grid2:
    nx: int                      # node count per axis (nx x ny nodes)
    ny: int
    dx: float
    dy: float

    @property
    def x(self):
        return np.arange(self.nx) * self.dx

    @property
    def y(self):
        return np.arange(self.ny) * self.dy

    def nodes(self):
        X, Y = np.meshgrid(self.x, self.y)
        return X, Y


@dataclass
class StaggeredField:
    """Node velocities with a two-layer halo, cell-centered pressure."""
    u: np.ndarray
    v: np.ndarray
    p: np.ndarray
    dt: float


class SolverDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Poisson with mixed boundary conditions
# ---------------------------------------------------------------------------

def fdm_poisson_mixed(n, f, g_d, g_n, length=1.0):
    """-lap(u) = f on the unit square, n x n cells.

    Dirichlet on left/right/top edges, Neumann on the bottom edge where the
    outward normal derivative n.grad(u) = -du/dy equals g_n. The Neumann row
    uses second-order ghost elimination. Returns (grid, u) with u shaped
    (n+1, n+1) indexed [j, i] = [y, x].
    """
    h = length / n
    npts = n + 1
    idx = lambda j, i: j * npts + i
    rows, cols, vals = [], [], []
    rhs = np.zeros(npts * npts)
    xs = np.arange(npts) * h
    ys = np.arange(npts) * h

    def add(r, c, v):
        rows.append(r)
        cols.append(c)
        vals.append(v)

    for j in range(npts):
        for i in range(npts):
            r = idx(j, i)
            x, y = xs[i], ys[j]
            dirichlet = i == 0 or i == npts - 1 or j == npts - 1
            if dirichlet:
                add(r, r, 1.0)
                rhs[r] = g_d(x, y)
            elif j == 0:
                # Neumann edge: ghost u[-1] = u[1] + 2 h g_n
                add(r, r, 4.0 / h**2)
                add(r, idx(0, i - 1), -1.0 / h**2)
                add(r, idx(0, i + 1), -1.0 / h**2)
                add(r, idx(1, i), -2.0 / h**2)
                rhs[r] = f(x, y) + 2.0 * g_n(x, y) / h
            else:
                add(r, r, 4.0 / h**2)
                add(r, idx(j, i - 1), -1.0 / h**2)
                add(r, idx(j, i + 1), -1.0 / h**2)
                add(r, idx(j - 1, i), -1.0 / h**2)
                add(r, idx(j + 1, i), -1.0 / h**2)
                rhs[r] = f(x, y)
    A = sparse.csr_matrix((vals, (rows, cols)), shape=(npts**2, npts**2))
    u = spsolve(A, rhs)
    res = np.abs(A @ u - rhs).max()
    if not np.isfinite(res) or res > 1e-8 * max(1.0, np.abs(rhs).max()):
        raise SolverDiverged(f"poisson solve residual {res:.3e}")
    grid = Grid2(npts, npts, h, h)
    return grid, u.reshape(npts, npts)


# ---------------------------------------------------------------------------
# projection-method solver pieces
# ---------------------------------------------------------------------------

def _upwind3(u, v, q, h, beta=0.25):
    """Third-order upwind advection of q by (u, v) on the padded node grid."""
    c = (slice(2, -2), slice(2, -2))
    qx = (-q[2:-2, 4:] + 8.0 * q[2:-2, 3:-1] - 8.0 * q[2:-2, 1:-3]
          + q[2:-2, :-4]) / (12.0 * h)
    qx_d = (q[2:-2, 4:] - 4.0 * q[2:-2, 3:-1] + 6.0 * q[2:-2, 2:-2]
            - 4.0 * q[2:-2, 1:-3] + q[2:-2, :-4]) / h
    qy = (-q[4:, 2:-2] + 8.0 * q[3:-1, 2:-2] - 8.0 * q[1:-3, 2:-2]
          + q[:-4, 2:-2]) / (12.0 * h)
    qy_d = (q[4:, 2:-2] - 4.0 * q[3:-1, 2:-2] + 6.0 * q[2:-2, 2:-2]
            - 4.0 * q[1:-3, 2:-2] + q[:-4, 2:-2]) / h
    return (u[c] * qx + beta * np.abs(u[c]) * qx_d
            + v[c] * qy + beta * np.abs(v[c]) * qy_d)


def _laplacian(q, h):
    return (q[2:-2, 3:-1] - 2.0 * q[2:-2, 2:-2] + q[2:-2, 1:-3]
            + q[3:-1, 2:-2] - 2.0 * q[2:-2, 2:-2] + q[1:-3, 2:-2]) / h**2


def _cell_divergence(u, v, h):
    """Divergence at cell centers from corner velocities."""
    ux = 0.5 * ((u[1:-2, 2:-1] - u[1:-2, 1:-2])
                + (u[2:-1, 2:-1] - u[2:-1, 1:-2])) / h
    vy = 0.5 * ((v[2:-1, 1:-2] - v[1:-2, 1:-2])
                + (v[2:-1, 2:-1] - v[1:-2, 2:-1])) / h
    return ux + vy


def _node_pressure_gradient(p, h):
    px = 0.5 * ((p[1:-2, 2:-1] - p[1:-2, 1:-2])
                + (p[2:-1, 2:-1] - p[2:-1, 1:-2])) / h
    py = 0.5 * ((p[2:-1, 1:-2] - p[1:-2, 1:-2])
                + (p[2:-1, 2:-1] - p[1:-2, 2:-1])) / h
    return px, py


def _ppe_factor(ncx, ncy, pin, solid=None):
    """Factorized pressure-Poisson operator on the physical cell grid.

    Homogeneous Neumann walls (mirror cells), one pinned cell for the gauge,
    optional solid mask (cells excluded, their faces treated as walls).
    """
    idx = lambda j, i: j * ncx + i
    rows, cols, vals = [], [], []
    for j in range(ncy):
        for i in range(ncx):
            r = idx(j, i)
            if solid is not None and solid[j, i]:
                rows.append(r); cols.append(r); vals.append(1.0)
                continue
            if (j, i) == pin:
                rows.append(r); cols.append(r); vals.append(1.0)
                continue
            diag = 0.0
            for dj, di in ((0, 1), (0, -1), (1, 0), (-1, 0)):
                jj, ii = j + dj, i + di
                inside = 0 <= jj < ncy and 0 <= ii < ncx
                if inside and not (solid is not None and solid[jj, ii]):
                    diag -= 1.0
                    rows.append(r); cols.append(idx(jj, ii)); vals.append(1.0)
            rows.append(r); cols.append(r); vals.append(diag)
    A = sparse.csc_matrix((vals, (rows, cols)), shape=(ncx * ncy, ncx * ncy))
    return splu(A)


def fdm_cavity(n, re, tol=1e-8, max_steps=200000, safety=0.2,
               callback=None):
    """Steady lid-driven cavity by explicit projection time-marching.

    n cells per side; velocities on nodes with two halo layers, pressure at
    cell centers with one halo ring. Marches until the relative velocity
    change per step drops below tol. Returns (grid, u, v, p_nodes) on the
    physical (n+1)^2 node grid.
    """
    h = 1.0 / n
    nn = n + 3                    # nodes incl. one halo layer each side
    nc = n + 2                    # cells incl. one halo ring
    u = np.zeros((nn, nn))
    v = np.zeros((nn, nn))
    p = np.zeros((nc, nc))
    nu = 1.0 / re
    dt = safety * min(h, 0.5 * h * h / nu)

    def apply_velocity_bc(u, v):
        u[0, :] = u[1, :] = 0.0
        v[0, :] = v[1, :] = 0.0
        u[-1, :] = u[-2, :] = 1.0     # driven lid
        v[-1, :] = v[-2, :] = 0.0
        u[:, 0] = u[:, 1] = 0.0
        v[:, 0] = v[:, 1] = 0.0
        u[:, -1] = u[:, -2] = 0.0
        v[:, -1] = v[:, -2] = 0.0
        # corners of the lid stay with the stationary walls
        u[-1, :2] = u[-2, :2] = 0.0
        u[-1, -2:] = u[-2, -2:] = 0.0

    apply_velocity_bc(u, v)
    lu = _ppe_factor(n, n, pin=(0, n // 2))
    rhs = np.zeros(n * n)

    for step in range(1, max_steps + 1):
        u_old = u.copy()
        v_old = v.copy()
        conv_u = _upwind3(u_old, v_old, u_old, h)
        conv_v = _upwind3(u_old, v_old, v_old, h)
        u_hat = u_old.copy()
        v_hat = v_old.copy()
        u_hat[2:-2, 2:-2] += dt * (-conv_u + nu * _laplacian(u_old, h))
        v_hat[2:-2, 2:-2] += dt * (-conv_v + nu * _laplacian(v_old, h))
        apply_velocity_bc(u_hat, v_hat)

        div = _cell_divergence(u_hat, v_hat, h)
        rhs[:] = (div * h * h / dt).ravel()
        rhs[(0) * n + n // 2] = 0.0
        p_phys = lu.solve(rhs).reshape(n, n)
        p[1:-1, 1:-1] = p_phys
        p[0, :] = p[1, :]
        p[-1, :] = p[-2, :]
        p[:, 0] = p[:, 1]
        p[:, -1] = p[:, -2]

        px, py = _node_pressure_gradient(p, h)
        u[2:-2, 2:-2] = u_hat[2:-2, 2:-2] - dt * px
        v[2:-2, 2:-2] = v_hat[2:-2, 2:-2] - dt * py
        apply_velocity_bc(u, v)

        unorm = math.sqrt(float(np.sum(u_old**2)))
        res = math.sqrt(float(np.sum((u - u_old) ** 2))) / max(unorm, 1e-30)
        if callback is not None and step % 500 == 0:
            callback(step, res)
        if not np.isfinite(res):
            raise SolverDiverged(
                f"cavity diverged at step {step}; dt={dt:.3e} "
                f"(CFL/diffusion limit exceeded?)")
        if res < tol and step > 10:
            break
    else:
        raise SolverDiverged("cavity did not reach the steady criterion")

    grid = Grid2(n + 1, n + 1, h, h)
    u_phys = u[1:-1, 1:-1]
    v_phys = v[1:-1, 1:-1]
    # pressure to nodes by averaging the four surrounding cells
    pn = 0.25 * (p[:-1, :-1] + p[:-1, 1:] + p[1:, :-1] + p[1:, 1:])
    return grid, u_phys, v_phys, pn


def fdm_channel_obstacle(n_per_unit=40, width=4.0, height=1.0,
                         obstacle_center=(1.0, 0.5), obstacle_size=0.2,
                         viscosity=2e-3, spin_up=4.0, window=2.0,
                         snap_dt=0.1, safety=0.2, callback=None):
    """Unsteady channel flow around a square obstacle (desk scale).

    Parabolic inlet (peak 1), zero-gradient outlet, no-slip walls and
    obstacle. Returns (times, node_x, node_y, snapshots) where snapshots is
    a list of (u, v, p) node arrays over the collection window; obstacle
    nodes carry zero velocity.
    """
    h = 1.0 / n_per_unit
    nx = int(round(width / h)) + 3
    ny = int(round(height / h)) + 3
    ncx, ncy = nx - 3, ny - 3
    u = np.zeros((ny, nx))
    v = np.zeros((ny, nx))
    p = np.zeros((ncy + 2, ncx + 2))
    dt = safety * min(h, 0.5 * h * h / viscosity)

    xs = (np.arange(nx) - 1) * h
    ys = (np.arange(ny) - 1) * h
    y_prof = 4.0 * ys * (height - ys) / height**2
    y_prof = np.clip(y_prof, 0.0, None)

    ocx, ocy = obstacle_center
    half = obstacle_size / 2.0
    X, Y = np.meshgrid(xs, ys)
    solid_node = ((np.abs(X - ocx) <= half + 1e-12)
                  & (np.abs(Y - ocy) <= half + 1e-12))
    cx = (np.arange(ncx) + 0.5) * h
    cy = (np.arange(ncy) + 0.5) * h
    CX, CY = np.meshgrid(cx, cy)
    solid_cell = (np.abs(CX - ocx) < half) & (np.abs(CY - ocy) < half)

    def apply_bc(u, v):
        u[:, 0] = u[:, 1] = y_prof
        v[:, 0] = v[:, 1] = 0.0
        u[:, -1] = u[:, -2] = u[:, -3]      # zero-gradient outlet
        v[:, -1] = v[:, -2] = v[:, -3]
        u[0, :] = u[1, :] = 0.0
        v[0, :] = v[1, :] = 0.0
        u[-1, :] = u[-2, :] = 0.0
        v[-1, :] = v[-2, :] = 0.0
        u[solid_node] = 0.0
        v[solid_node] = 0.0

    apply_bc(u, v)
    lu = _ppe_factor(ncx, ncy, pin=(0, 0), solid=solid_cell)

    times = []
    snaps = []
    t = 0.0
    total = spin_up + window
    next_snap = spin_up
    step = 0
    while t < total - 1e-12:
        step += 1
        u_old, v_old = u.copy(), v.copy()
        conv_u = _upwind3(u_old, v_old, u_old, h)
        conv_v = _upwind3(u_old, v_old, v_old, h)
        u_hat, v_hat = u_old.copy(), v_old.copy()
        u_hat[2:-2, 2:-2] += dt * (-conv_u + viscosity * _laplacian(u_old, h))
        v_hat[2:-2, 2:-2] += dt * (-conv_v + viscosity * _laplacian(v_old, h))
        apply_bc(u_hat, v_hat)

        div = _cell_divergence(u_hat, v_hat, h)
        rhs = (div * h * h / dt)
        rhs[solid_cell] = 0.0
        rhs[0, 0] = 0.0
        p_phys = lu.solve(rhs.ravel()).reshape(ncy, ncx)
        p[1:-1, 1:-1] = p_phys
        p[0, :] = p[1, :]
        p[-1, :] = p[-2, :]
        p[:, 0] = p[:, 1]
        p[:, -1] = p[:, -2]

        px, py = _node_pressure_gradient(p, h)
        u[2:-2, 2:-2] = u_hat[2:-2, 2:-2] - dt * px
        v[2:-2, 2:-2] = v_hat[2:-2, 2:-2] - dt * py
        apply_bc(u, v)
        if not np.isfinite(u).all():
            raise SolverDiverged(f"obstacle flow diverged at step {step}; "
                                 f"dt={dt:.3e}")
        t += dt
        if callback is not None and step % 500 == 0:
            callback(step, t)
        if t >= next_snap - 1e-12 and len(snaps) < int(window / snap_dt) + 1:
            pn = 0.25 * (p[:-1, :-1] + p[:-1, 1:] + p[1:, :-1] + p[1:, 1:])
            snaps.append((u[1:-1, 1:-1].copy(), v[1:-1, 1:-1].copy(),
                          pn.copy()))
            times.append(round(t - spin_up, 10))
            next_snap += snap_dt
    return np.array(times), xs[1:-1], ys[1:-1], snaps


# ---------------------------------------------------------------------------
# reference-field files
# ---------------------------------------------------------------------------

class IngestError(ValueError):
    pass


def export_reference_csv(path, points, values, with_time=False,
                         with_pressure=True):
    """Write `x,y[,t],u[,v,p]` rows for later ingestion."""
    header = ["x", "y"] + (["t"] if with_time else [])
    ncomp = values.shape[1]
    header += ["u", "v", "p"][:ncomp] if ncomp <= 3 else \
        [f"c{i}" for i in range(ncomp)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for pt, val in zip(points, values):
            w.writerow([f"{x:.17g}" for x in list(pt) + list(val)])
    return path


def ingest_reference_csv(path, bounds=None):
    """Validated reference point cloud from a `x,y[,t],u[,v,p]` CSV.

    Returns (points, values, columns). Malformed rows and out-of-bounds
    points are reported with their line numbers.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestError(f"{path}: empty file")
        header = [h.strip().lower() for h in header]
        if header[:2] != ["x", "y"]:
            raise IngestError(f"{path}: header must start with x,y "
                              f"(got {header})")
        has_t = len(header) > 2 and header[2] == "t"
        coord_cols = 3 if has_t else 2
        value_cols = header[coord_cols:]
        if not value_cols:
            raise IngestError(f"{path}: no field columns after coordinates")
        rows = []
        bad = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                bad.append((lineno, "wrong column count"))
                continue
            try:
                rows.append([float(c) for c in row])
            except ValueError:
                bad.append((lineno, "non-numeric value"))
        if bad:
            detail = "; ".join(f"line {ln}: {msg}" for ln, msg in bad[:10])
            raise IngestError(f"{path}: {len(bad)} malformed rows ({detail})")
        if not rows:
            raise IngestError(f"{path}: no data rows")
    arr = np.array(rows)
    points = arr[:, :coord_cols]
    values = arr[:, coord_cols:]
    # drop exact duplicate coordinates, keeping the first occurrence
    _, keep = np.unique(points, axis=0, return_index=True)
    keep.sort()
    points, values = points[keep], values[keep]
    if bounds is not None:
        (x0, x1), (y0, y1) = bounds
        out = ((points[:, 0] < x0 - 1e-12) | (points[:, 0] > x1 + 1e-12)
               | (points[:, 1] < y0 - 1e-12) | (points[:, 1] > y1 + 1e-12))
        if out.any():
            lines = (keep[out] + 2)[:10]
            raise IngestError(
                f"{path}: {int(out.sum())} points outside the domain "
                f"bounding box (first lines: {list(lines)})")
    return points, values, header


def sample_observations(points, values, n, seed, noise_sigma=0.0):
    """Uniform random subsample of reference rows with optional noise."""
    if n > len(points):
        raise ValueError(f"requested {n} observations from {len(points)}")
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(points), size=n, replace=False)
    pick.sort()
    obs = values[pick].copy()
    if noise_sigma > 0.0:
        obs += rng.normal(0.0, noise_sigma, size=obs.shape)
    return points[pick].copy(), obs
