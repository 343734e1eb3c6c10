"""Distance fields to piecewise boundaries built from R-function joins.

Boundaries are lists of oriented pieces (segments and circular arcs). Each
piece gets a smooth approximate distance function (ADF) that vanishes
exactly on the piece; the pieces are merged by one of three joining rules:

* naive       -- product of signed distances to the carrier lines
* non_normalized -- product of piece ADFs
* normalized(m)  -- R-equivalence join that keeps a unit inward normal
                    derivative on the boundary up to order m

Segments are oriented so the domain lies to the left of travel (pieces
listed counterclockwise); arcs carry an explicit interior side. Evaluation
works on plain coordinate arrays or on jets, so gradients and Laplacians of
the joined field come from the same formulas.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .jets import Jet, space
from .ops import absolute, sqrt, value_of

_GUARD = 1e-12
TWO_PI = 2.0 * math.pi


# ---------------------------------------------------------------------------
# shapes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Segment:
    p: tuple
    q: tuple

    def __post_init__(self):
        if self.length == 0.0:
            raise ValueError("degenerate segment: endpoints coincide")

    @property
    def length(self):
        return math.hypot(self.q[0] - self.p[0], self.q[1] - self.p[1])

    @property
    def normal(self):
        """Unit normal, left of the direction of travel (inward for CCW)."""
        d = self.length
        return (-(self.q[1] - self.p[1]) / d, (self.q[0] - self.p[0]) / d)

    def point_at(self, t):
        return (self.p[0] + t * (self.q[0] - self.p[0]),
                self.p[1] + t * (self.q[1] - self.p[1]))


@dataclass(frozen=True)
class Arc:
    """Circular arc from start_angle, sweeping CCW by span radians.

    interior_sign is +1 when the domain lies inside the circle and -1 when
    the circle bounds a hole (annulus inner wall, obstacles). A span of
    2*pi denotes a full circle.
    """

    center: tuple
    radius: float
    start_angle: float
    span: float
    interior_sign: int = 1

    def __post_init__(self):
        if self.radius <= 0.0:
            raise ValueError("arc radius must be positive")
        if not 0.0 < self.span <= TWO_PI:
            raise ValueError("arc span must lie in (0, 2*pi]")

    @property
    def is_full_circle(self):
        return self.span >= TWO_PI - 1e-12

    @property
    def length(self):
        return self.radius * self.span

    def point_at(self, t):
        a = self.start_angle + t * self.span
        return (self.center[0] + self.radius * math.cos(a),
                self.center[1] + self.radius * math.sin(a))


@dataclass(frozen=True)
class BoundaryPiece:
    shape: object
    bc_kind: str = "dirichlet"          # "dirichlet" | "neumann"
    bc_value: object = 0.0              # scalar or callable(x, y)
    mu: int = 1

    def __post_init__(self):
        if self.bc_kind not in ("dirichlet", "neumann"):
            raise ValueError(f"unknown bc_kind {self.bc_kind!r}")
        if self.mu < 1:
            raise ValueError("interpolation order mu must be >= 1")

    def bc_at(self, x, y):
        if callable(self.bc_value):
            return self.bc_value(x, y)
        return self.bc_value + 0.0 * value_of(x)


@dataclass(frozen=True)
class DistanceField:
    pieces: tuple
    join: str = "normalized"            # "naive" | "non_normalized" | "normalized"
    m: int = 1

    def __post_init__(self):
        if len(self.pieces) == 0:
            raise ValueError("distance field needs at least one piece")
        if self.join not in ("naive", "non_normalized", "normalized"):
            raise ValueError(f"unknown join {self.join!r}")
        if self.join == "normalized" and self.m < 1:
            raise ValueError("normalization order m must be >= 1")

    def with_pieces(self, pieces):
        return replace(self, pieces=tuple(pieces))

    def dirichlet(self):
        """Sub-field over the Dirichlet pieces (the phi for hard trials)."""
        kept = tuple(p for p in self.pieces if p.bc_kind == "dirichlet")
        if not kept:
            raise ValueError("no Dirichlet pieces in this field")
        return replace(self, pieces=kept)

    def neumann_pieces(self):
        return tuple(p for p in self.pieces if p.bc_kind == "neumann")


# ---------------------------------------------------------------------------
# per-piece fields
# ---------------------------------------------------------------------------

def signed_distance(seg, x, y):
    """Signed distance to the carrier line, scaled by the segment length."""
    d = seg.length
    nx, ny = seg.normal
    return (nx * (x - seg.p[0]) + ny * (y - seg.p[1])) / d


def trimming(seg, x, y, verbatim=False):
    """Disk predicate restricting the carrier line to the segment.

    The verbatim variant subtracts the unsquared distance to the midpoint
    (dimensionally odd but kept for comparison); the default subtracts the
    squared distance so the function vanishes exactly on the trimming
    circle.
    """
    d = seg.length
    mx = 0.5 * (seg.p[0] + seg.q[0])
    my = 0.5 * (seg.p[1] + seg.q[1])
    r2 = (x - mx) ** 2 + (y - my) ** 2
    if verbatim:
        return ((0.5 * d) ** 2 - sqrt(r2)) / d
    return ((0.5 * d) ** 2 - r2) / d


def _trim_join(s, t):
    """Smooth ADF for the set {s = 0} ∩ {t >= 0}."""
    inner = sqrt(s ** 4 + t ** 2)
    return sqrt(s ** 2 + (0.5 * (inner - t)) ** 2)


def adf_segment(seg, x, y, verbatim_trim=False):
    """Smooth nonnegative distance to the closed segment."""
    s = signed_distance(seg, x, y)
    t = trimming(seg, x, y, verbatim=verbatim_trim)
    return _trim_join(s, t)


def circle_signed(arc, x, y):
    """First-order normalized signed distance to the circle, positive inside."""
    r2 = (x - arc.center[0]) ** 2 + (y - arc.center[1]) ** 2
    return (arc.radius ** 2 - r2) / (2.0 * arc.radius)


def adf_arc(arc, x, y):
    """Smooth nonnegative distance to an arc (or a full circle)."""
    s = circle_signed(arc, x, y)
    if arc.is_full_circle:
        return absolute(s)
    # trimming disk centered at the arc midpoint through both endpoints
    mid = arc.point_at(0.5)
    end = arc.point_at(1.0)
    rt = math.hypot(end[0] - mid[0], end[1] - mid[1])
    if rt == 0.0:
        return absolute(s)
    r2 = (x - mid[0]) ** 2 + (y - mid[1]) ** 2
    t = (rt ** 2 - r2) / (2.0 * rt)
    return _trim_join(s, t)


def piece_adf(piece, x, y):
    shp = piece.shape
    if isinstance(shp, Segment):
        return adf_segment(shp, x, y)
    if isinstance(shp, Arc):
        return adf_arc(shp, x, y)
    raise TypeError(f"unsupported shape {type(shp).__name__}")


def piece_oriented_signed(piece, x, y):
    """Signed distance positive on the domain side (boundary-limit ADF)."""
    shp = piece.shape
    if isinstance(shp, Segment):
        return signed_distance(shp, x, y)
    if isinstance(shp, Arc):
        return circle_signed(shp, x, y) * shp.interior_sign
    raise TypeError(f"unsupported shape {type(shp).__name__}")


def piece_inward_normal(piece, x, y):
    shp = piece.shape
    if isinstance(shp, Segment):
        nx, ny = shp.normal
        ones = np.ones_like(np.asarray(x, dtype=float))
        return np.stack([nx * ones, ny * ones], axis=-1)
    dx = np.asarray(x) - shp.center[0]
    dy = np.asarray(y) - shp.center[1]
    r = np.sqrt(dx * dx + dy * dy)
    r = np.where(r > 0, r, 1.0)
    sgn = -float(shp.interior_sign)
    return np.stack([sgn * dx / r, sgn * dy / r], axis=-1)


# ---------------------------------------------------------------------------
# joins
# ---------------------------------------------------------------------------

def join_naive(sdf_values):
    """Intersection of half-spaces: plain product of signed distances."""
    if len(sdf_values) == 0:
        raise ValueError("empty join")
    out = sdf_values[0]
    for v in sdf_values[1:]:
        out = out * v
    return out


def join_non_normalized(adf_values):
    """Product of piece ADFs: zero set correct, normal derivative not."""
    if len(adf_values) == 0:
        raise ValueError("empty join")
    out = adf_values[0]
    for v in adf_values[1:]:
        out = out * v
    return out


def join_normalized(adf_values, m):
    """R-equivalence join (sum phi_i^-m)^(-1/m).

    Array inputs take a rescaled path that is overflow-safe for any m and
    returns the exact limit 0 where any piece vanishes. Jet inputs use the
    direct formula, which is valid away from the boundary; on-boundary jet
    evaluation is special-cased by the field evaluators.
    """
    if len(adf_values) == 0:
        raise ValueError("empty join")
    if m < 1:
        raise ValueError("normalization order m must be >= 1")
    if len(adf_values) == 1:
        return adf_values[0]
    if isinstance(adf_values[0], Jet):
        total = adf_values[0] ** (-m)
        for v in adf_values[1:]:
            total = total + v ** (-m)
        return total ** (-1.0 / m)
    vals = np.stack([np.asarray(v, dtype=float) for v in adf_values])
    if np.any(vals < 0):
        raise ValueError("normalized join expects nonnegative piece values")
    vmin = vals.min(axis=0)
    safe = np.where(vmin > 0.0, vmin, 1.0)
    with np.errstate(over="ignore", under="ignore"):
        ratios = vals / safe
        total = np.power(ratios, -float(m)).sum(axis=0)
        joined = safe * np.power(total, -1.0 / m)
    return np.where(vmin > 0.0, joined, 0.0)


def _join_values(dfield, values_adf, values_signed):
    if dfield.join == "naive":
        return join_naive(values_signed)
    if dfield.join == "non_normalized":
        return join_non_normalized(values_adf)
    return join_normalized(values_adf, dfield.m)


# ---------------------------------------------------------------------------
# field evaluation
# ---------------------------------------------------------------------------

def field_value(dfield, xy):
    """Joined field on an (..., 2) array of points."""
    xy = np.asarray(xy, dtype=float)
    x, y = xy[..., 0], xy[..., 1]
    adf = [piece_adf(p, x, y) for p in dfield.pieces]
    sgn = None
    if dfield.join == "naive":
        sgn = [piece_oriented_signed(p, x, y) for p in dfield.pieces]
    return _join_values(dfield, adf, sgn)


FLAG_SMOOTH = 0
FLAG_BOUNDARY = 1
FLAG_CORNER = 2


def field_eval(dfield, xy, order=2, on_tol=_GUARD):
    """Joined field as a jet, with per-point smoothness flags.

    Points sitting on a piece (ADF below on_tol) get the analytic boundary
    limit: the oriented signed distance of the touching piece, whose
    gradient is the inward unit normal. Corner points (two or more pieces
    touching) get the average of the one-sided limits and a corner flag.
    Only the normalized join has this limit structure; the other joins are
    evaluated directly (their jets are finite on the boundary).
    """
    xy = np.asarray(xy, dtype=float)
    if xy.ndim != 2 or xy.shape[1] != 2:
        raise ValueError("expected points of shape (n, 2)")
    sp = space(2, order)
    seeds = Jet.seeds(sp, xy)
    x, y = seeds[..., 0], seeds[..., 1]
    flags = np.zeros(xy.shape[0], dtype=int)

    if dfield.join != "normalized":
        adf = [piece_adf(p, x, y) for p in dfield.pieces]
        sgn = None
        if dfield.join == "naive":
            sgn = [piece_oriented_signed(p, x, y) for p in dfield.pieces]
        return _join_values(dfield, adf, sgn), flags

    plain_x, plain_y = xy[:, 0], xy[:, 1]
    plain_vals = np.stack(
        [value_of(piece_adf(p, plain_x, plain_y)) for p in dfield.pieces]
    )
    on_piece = plain_vals <= on_tol
    n_on = on_piece.sum(axis=0)
    flags[n_on == 1] = FLAG_BOUNDARY
    flags[n_on >= 2] = FLAG_CORNER
    interior = n_on == 0

    # general path with on-boundary points patched to a harmless dummy value;
    # their joined jets are fully overwritten by the analytic limit below
    jet_vals = []
    with np.errstate(all="ignore"):
        for k, p in enumerate(dfield.pieces):
            jv = piece_adf(p, x, y)
            bad = on_piece[k]
            if bad.any():
                jv = jv.copy()
                jv.coef[:, bad] = 0.0
                jv.coef[0, bad] = 1.0
            jet_vals.append(jv)
        joined = join_normalized(jet_vals, dfield.m)
    if not interior.all():
        coef = joined.coef.copy()
        touched = ~interior
        limit = np.zeros_like(coef[:, touched])
        counts = n_on[touched].astype(float)
        for k, p in enumerate(dfield.pieces):
            sel = on_piece[k, touched]
            if sel.any():
                sx = Jet(sp, x.coef[:, touched][:, sel])
                sy = Jet(sp, y.coef[:, touched][:, sel])
                sj = piece_oriented_signed(p, sx, sy)
                limit[:, sel] += sj.coef
        coef[:, touched] = limit / counts
        joined = Jet(sp, coef)
    return joined, flags


def field_gradient(dfield, xy):
    """Gradient of the joined field; flags mark boundary and corner points."""
    jet, flags = field_eval(dfield, xy, order=1)
    return np.stack([jet.first(0), jet.first(1)], axis=-1), flags


def field_laplacian(dfield, xy):
    jet, flags = field_eval(dfield, xy, order=2)
    return jet.laplacian(), flags


# ---------------------------------------------------------------------------
# exact distance (brute force oracle)
# ---------------------------------------------------------------------------

def _segment_distance(seg, x, y):
    px, py = seg.p
    dx = seg.q[0] - px
    dy = seg.q[1] - py
    L2 = dx * dx + dy * dy
    t = np.clip(((x - px) * dx + (y - py) * dy) / L2, 0.0, 1.0)
    return np.sqrt((x - px - t * dx) ** 2 + (y - py - t * dy) ** 2)


def _arc_distance(arc, x, y):
    cx, cy = arc.center
    dx = np.asarray(x) - cx
    dy = np.asarray(y) - cy
    r = np.sqrt(dx * dx + dy * dy)
    if arc.is_full_circle:
        return np.abs(r - arc.radius)
    ang = np.arctan2(dy, dx)
    rel = np.mod(ang - arc.start_angle, TWO_PI)
    inside = rel <= arc.span
    d_ring = np.abs(r - arc.radius)
    ex, ey = arc.point_at(0.0)
    fx, fy = arc.point_at(1.0)
    d_ends = np.minimum(np.sqrt((x - ex) ** 2 + (y - ey) ** 2),
                        np.sqrt((x - fx) ** 2 + (y - fy) ** 2))
    return np.where(inside, d_ring, d_ends)


def edf(dfield, xy):
    """Exact Euclidean distance to the boundary (min over pieces)."""
    xy = np.asarray(xy, dtype=float)
    x, y = xy[..., 0], xy[..., 1]
    dists = []
    for p in dfield.pieces:
        if isinstance(p.shape, Segment):
            dists.append(_segment_distance(p.shape, x, y))
        else:
            dists.append(_arc_distance(p.shape, x, y))
    return np.min(np.stack(dists), axis=0)


# ---------------------------------------------------------------------------
# transfinite interpolation
# ---------------------------------------------------------------------------

def transfinite_weights(adf_values, mus, return_degenerate=False):
    """Inverse-distance weights in the division-free product form.

    w_i = prod_{j != i} phi_j^mu_j / sum_k prod_{j != k} phi_j^mu_j, which is
    finite on the boundary where individual phi vanish. Where every product
    vanishes at once (a corner shared by pieces) the weights fall back to
    the symmetric value 1/N; the optional degenerate mask reports those
    points.
    """
    n = len(adf_values)
    if n != len(mus):
        raise ValueError("adf_values and mus must have the same length")
    if n == 0:
        raise ValueError("need at least one piece")
    powered = [v ** int(mu) for v, mu in zip(adf_values, mus)]
    prods = []
    for i in range(n):
        prod = None
        for j in range(n):
            if j == i:
                continue
            prod = powered[j] if prod is None else prod * powered[j]
        if prod is None:
            prod = 1.0 + 0.0 * value_of(adf_values[i])
        prods.append(prod)
    if isinstance(prods[0], Jet):
        denom = prods[0]
        for p in prods[1:]:
            denom = denom + p
        inv = denom.recip()
        weights = [p * inv for p in prods]
        if return_degenerate:
            deg = value_of(denom) <= 0.0
            return weights, deg
        return weights
    prods = np.stack([np.asarray(p, dtype=float) for p in prods])
    denom = prods.sum(axis=0)
    deg = denom <= _GUARD * prods.shape[0]
    safe = np.where(deg, 1.0, denom)
    weights = np.where(deg, 1.0 / n, prods / safe)
    if return_degenerate:
        return list(weights), deg
    return list(weights)


def transfinite_interpolant(pieces, x, y, values=None, adfs=None):
    """Smooth extension of piecewise Dirichlet data.

    pieces: Dirichlet boundary pieces. values: optional per-piece data
    overriding piece.bc_value (used for vector problems where each velocity
    component has its own data). adfs: optional precomputed piece ADFs at
    (x, y).
    """
    if len(pieces) == 0:
        raise ValueError("transfinite interpolation needs Dirichlet pieces")
    if adfs is None:
        adfs = [piece_adf(p, x, y) for p in pieces]
    if values is None:
        gs = [p.bc_at(x, y) for p in pieces]
    else:
        gs = [v(x, y) if callable(v) else v + 0.0 * value_of(x)
              for v in values]
    if len(pieces) == 1:
        return gs[0]
    weights = transfinite_weights(adfs, [p.mu for p in pieces])
    out = weights[0] * gs[0]
    for w, g in zip(weights[1:], gs[1:]):
        out = out + w * g
    return out


# ---------------------------------------------------------------------------
# boundary sampling
# ---------------------------------------------------------------------------

def sample_boundary(pieces, n, seed, avoid_ends=0.0):
    """Sample points on pieces, proportionally to arc length.

    Returns (points (n,2), inward normals (n,2), piece indices). avoid_ends
    shrinks the per-piece parameter range to [avoid_ends, 1-avoid_ends] so
    corner points can be excluded.
    """
    pieces = list(pieces)
    if not pieces:
        raise ValueError("no pieces to sample")
    rng = np.random.default_rng(seed)
    lengths = np.array([p.shape.length for p in pieces])
    counts = rng.multinomial(n, lengths / lengths.sum())
    pts, nrm, idx = [], [], []
    for k, (p, c) in enumerate(zip(pieces, counts)):
        if c == 0:
            continue
        t = rng.uniform(avoid_ends, 1.0 - avoid_ends, size=c)
        xy = np.array([p.shape.point_at(ti) for ti in t])
        pts.append(xy)
        nrm.append(piece_inward_normal(p, xy[:, 0], xy[:, 1]))
        idx.append(np.full(c, k))
    return np.concatenate(pts), np.concatenate(nrm), np.concatenate(idx)


# ---------------------------------------------------------------------------
# named domains
# ---------------------------------------------------------------------------

def _polygon_pieces(vertices):
    out = []
    for a, b in zip(vertices, vertices[1:] + vertices[:1]):
        out.append(BoundaryPiece(Segment(tuple(a), tuple(b))))
    return out


def heart_pieces(center=(0.0, 0.0), hump_radius=0.5, cusp_depth=1.2,
                 scale=1.0, interior_sign=1):
    """Two top arcs plus two cusp segments; CCW when interior_sign is +1."""
    cx, cy = center
    r = hump_radius * scale
    d = cusp_depth * scale
    w = 2.0 * r
    right = Arc((cx + r, cy), r, 0.0, math.pi, interior_sign=interior_sign)
    left = Arc((cx - r, cy), r, 0.0, math.pi, interior_sign=interior_sign)
    if interior_sign == 1:
        segs = [Segment((cx - w, cy), (cx, cy - d)),
                Segment((cx, cy - d), (cx + w, cy))]
    else:
        segs = [Segment((cx, cy - d), (cx - w, cy)),
                Segment((cx + w, cy), (cx, cy - d))]
    return [BoundaryPiece(right), BoundaryPiece(left)] + \
        [BoundaryPiece(s) for s in segs]


def build_named_domain(name, params=None):
    """Construct a named domain's distance field with default join settings.

    Pieces come back with all-Dirichlet zero data; problem setups replace
    the boundary conditions they need via dataclasses.replace.
    """
    params = dict(params or {})
    join = params.pop("join", "normalized")
    m = int(params.pop("m", 1))
    if name == "square":
        side = params.pop("side", 1.0)
        v = [(0, 0), (side, 0), (side, side), (0, side)]
        pieces = _polygon_pieces(v)
    elif name == "l_shape":
        # unit square minus its bottom-right quarter
        v = [(0, 0), (0.5, 0), (0.5, 0.5), (1, 0.5), (1, 1), (0, 1)]
        pieces = _polygon_pieces(v)
    elif name == "heart":
        pieces = heart_pieces(
            center=params.pop("center", (0.0, 0.0)),
            hump_radius=params.pop("hump_radius", 0.5),
            cusp_depth=params.pop("cusp_depth", 1.2),
            scale=params.pop("scale", 1.0),
        )
    elif name == "annulus":
        cx, cy = params.pop("center", (0.0, 0.0))
        r_in = params.pop("r_in", 0.5)
        r_out = params.pop("r_out", 1.0)
        if not 0.0 < r_in < r_out:
            raise ValueError("annulus needs 0 < r_in < r_out")
        pieces = [
            BoundaryPiece(Arc((cx, cy), r_out, 0.0, TWO_PI, interior_sign=1)),
            BoundaryPiece(Arc((cx, cy), r_in, 0.0, TWO_PI, interior_sign=-1)),
        ]
    elif name == "rect_with_obstacle":
        width = params.pop("width", 4.0)
        height = params.pop("height", 1.0)
        obstacle = params.pop("obstacle", "square")
        size = params.pop("obstacle_size", 0.2)
        ocx, ocy = params.pop("obstacle_center", (1.0, 0.5))
        outer = _polygon_pieces([(0, 0), (width, 0), (width, height),
                                 (0, height)])
        if obstacle == "square":
            h = 0.5 * size
            # clockwise: flow domain lies to the left of travel
            v = [(ocx - h, ocy - h), (ocx - h, ocy + h),
                 (ocx + h, ocy + h), (ocx + h, ocy - h)]
            inner = _polygon_pieces(v)
        elif obstacle == "heart":
            scale = size / (2.0 * 0.5 + 1.2)   # bbox height -> size
            inner = heart_pieces(center=(ocx, ocy + 0.35 * size),
                                 scale=scale, interior_sign=-1)
        else:
            raise ValueError(f"unknown obstacle {obstacle!r}")
        pieces = outer + inner
    else:
        raise ValueError(f"unknown domain {name!r}")
    if params:
        raise ValueError(f"unused domain parameters: {sorted(params)}")
    return DistanceField(tuple(pieces), join=join, m=m)


# ---------------------------------------------------------------------------
# raster / slice export
# ---------------------------------------------------------------------------

def raster_grid(bounds, nx, ny):
    (x0, x1), (y0, y1) = bounds
    xs = np.linspace(x0, x1, nx)
    ys = np.linspace(y0, y1, ny)
    X, Y = np.meshgrid(xs, ys)
    return np.stack([X.ravel(), Y.ravel()], axis=-1)


def export_raster(dfield, path, bounds, nx=101, ny=101, derivs=False):
    """Row-major CSV raster: x,y,value[,gx,gy,lap]."""
    pts = raster_grid(bounds, nx, ny)
    vals = field_value(dfield, pts)
    rows = [pts[:, 0], pts[:, 1], vals]
    header = ["x", "y", "value"]
    if derivs:
        jet, _ = field_eval(dfield, pts, order=2)
        rows += [jet.first(0), jet.first(1), jet.laplacian()]
        header += ["gx", "gy", "lap"]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for vals_row in zip(*rows):
            w.writerow([f"{v:.17g}" for v in vals_row])
    return path


def slice_points(axis, value, lo, hi, n):
    s = np.linspace(lo, hi, n)
    if axis == "y":       # slice along fixed y, varying x
        return np.stack([s, np.full(n, value)], axis=-1), s
    if axis == "x":
        return np.stack([np.full(n, value), s], axis=-1), s
    raise ValueError("axis must be 'x' or 'y'")


def export_slice(dfield, path, axis, value, lo, hi, n=201, derivs=True):
    """Ordered slice samples: x,value[,gx,gy,lap] at fixed axis value."""
    pts, s = slice_points(axis, value, lo, hi, n)
    rows = [s]
    header = ["x"]
    if derivs:
        jet, _ = field_eval(dfield, pts, order=2)
        rows += [jet.value, jet.first(0), jet.first(1), jet.laplacian()]
        header += ["value", "gx", "gy", "lap"]
    else:
        rows += [field_value(dfield, pts)]
        header += ["value"]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for vals_row in zip(*rows):
            w.writerow([f"{v:.17g}" for v in vals_row])
    return path
