"""Origin-symmetric convex bodies with exact gauge, support and polar duality.

Four body classes are supported: lp balls, ellipsoids, and polytopes in
vertex or facet form (dimensions 2 and 3 for polytopes). The polar map is
exact class-to-class, so every duality identity downstream holds to machine
precision rather than up to a geometric approximation.

Vertex and facet lists are canonicalized at construction into exact
antipodal pairs, which makes gauge(-x) == gauge(x) bit-reliable.
"""

import numpy as np
from scipy.integrate import quad
from scipy.spatial import ConvexHull


class BodyValidationError(ValueError):
    """Raised for degenerate, asymmetric or otherwise invalid body data."""


# ---------------------------------------------------------------------------
# base class


class ConvexBody:
    """A symmetric convex body, queried through its gauge and support."""

    dim = None

    def gauge(self, x):
        """Minkowski functional: the t >= 0 with x on the boundary of t*body.

        Accepts a single vector or an array of shape (..., dim); returns a
        scalar or an array of shape (...).
        """
        raise NotImplementedError

    def support(self, xi):
        """sup over the body of <xi, x>; equals the polar body's gauge."""
        raise NotImplementedError

    def polar(self):
        """The polar body, mapped exactly within the supported classes."""
        raise NotImplementedError

    def scaled(self, c):
        """The dilate c*body (gauge divided by c)."""
        raise NotImplementedError

    def smooth_gauge(self, x):
        """Gauge for flow/Legendre use: identical for smooth bodies,
        p-norm rounding of the facet maximum for polytopes."""
        return self.gauge(x)

    def smooth_grad(self, x):
        """Gradient of smooth_gauge away from the origin."""
        raise NotImplementedError

    @property
    def is_smooth(self):
        return False

    def boundary_point(self, direction):
        """Radial projection of a nonzero direction onto the boundary."""
        d = np.asarray(direction, dtype=float)
        g = self.gauge(d)
        return d / (g[..., None] if d.ndim > 1 else g)

    def _check_dim(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            raise ValueError(
                "dimension mismatch: body is %dd, vector has shape %s"
                % (self.dim, (x.shape,))
            )
        return x


# ---------------------------------------------------------------------------
# lp balls


def conjugate_exponent(p):
    if p == 1.0:
        return np.inf
    if np.isinf(p):
        return 1.0
    return p / (p - 1.0)


def _lp_norm(x, p):
    if np.isinf(p):
        return np.max(np.abs(x), axis=-1)
    if p == 1.0:
        return np.sum(np.abs(x), axis=-1)
    if p == 2.0:
        return np.sqrt(np.sum(x * x, axis=-1))
    return np.sum(np.abs(x) ** p, axis=-1) ** (1.0 / p)


class LpBall(ConvexBody):
    """scale * {x : ||x||_p <= 1}."""

    def __init__(self, p, dim, scale=1.0):
        p = float(p)
        if not (p >= 1.0):
            raise BodyValidationError("lp exponent must satisfy p >= 1, got %r" % p)
        if dim < 2:
            raise BodyValidationError("dimension must be at least 2")
        if not (scale > 0):
            raise BodyValidationError("scale must be positive")
        self.p = p
        self.dim = int(dim)
        self.scale = float(scale)

    def __repr__(self):
        return "LpBall(p=%g, dim=%d, scale=%g)" % (self.p, self.dim, self.scale)

    def gauge(self, x):
        return _lp_norm(self._check_dim(x), self.p) / self.scale

    def support(self, xi):
        return _lp_norm(self._check_dim(xi), conjugate_exponent(self.p)) * self.scale

    def polar(self):
        return LpBall(conjugate_exponent(self.p), self.dim, 1.0 / self.scale)

    def scaled(self, c):
        return LpBall(self.p, self.dim, self.scale * c)

    @property
    def is_smooth(self):
        return 1.0 < self.p < np.inf

    def smooth_gauge(self, x):
        if self.is_smooth:
            return self.gauge(x)
        return self._facet_form().smooth_gauge(x) / self.scale

    def smooth_grad(self, x):
        x = self._check_dim(x)
        if self.is_smooth:
            p = self.p
            n = _lp_norm(x, p)
            n = np.where(n == 0, 1.0, n)
            g = np.sign(x) * (np.abs(x) / n[..., None]) ** (p - 1.0)
            return g / self.scale
        return self._facet_form().smooth_grad(x) / self.scale

    def _facet_form(self):
        # unit-scale polytope standing in for the non-smooth exponents
        if self.p == 1.0:
            signs = np.array(
                [s for s in np.ndindex(*(2,) * self.dim)], dtype=float
            ) * 2.0 - 1.0
            return _SmoothFacets(signs)
        if np.isinf(self.p):
            return _SmoothFacets(np.eye(self.dim))
        raise ValueError("facet form only for p in {1, inf}")


class _SmoothFacets:
    """p-norm rounding of max_i |<u_i, x>| over a half-set of facet normals."""

    def __init__(self, half_normals, power=64):
        self.u = np.asarray(half_normals, dtype=float)
        self.power = power

    def smooth_gauge(self, x):
        vals = np.abs(x @ self.u.T)
        m = np.max(vals, axis=-1)
        m = np.where(m == 0, 1.0, m)
        return m * np.sum((vals / m[..., None]) ** self.power, axis=-1) ** (
            1.0 / self.power
        )

    def smooth_grad(self, x):
        vals = x @ self.u.T
        a = np.abs(vals)
        m = np.max(a, axis=-1)
        m = np.where(m == 0, 1.0, m)
        w = (a / m[..., None]) ** (self.power - 1) * np.sign(vals)
        s = np.sum((a / m[..., None]) ** self.power, axis=-1) ** (
            1.0 / self.power - 1.0
        )
        return s[..., None] * (w @ self.u)


# ---------------------------------------------------------------------------
# ellipsoids


class Ellipsoid(ConvexBody):
    """{x : x^T A x <= 1} for a symmetric positive definite shape form A."""

    def __init__(self, shape_form):
        A = np.asarray(shape_form, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise BodyValidationError("shape form must be a square matrix")
        A = 0.5 * (A + A.T)
        w = np.linalg.eigvalsh(A)
        if w[0] <= 0:
            raise BodyValidationError("shape form must be positive definite")
        self.A = A
        self.Ainv = np.linalg.inv(A)
        self.dim = A.shape[0]

    def __repr__(self):
        return "Ellipsoid(dim=%d)" % self.dim

    def gauge(self, x):
        x = self._check_dim(x)
        return np.sqrt(np.einsum("...i,ij,...j->...", x, self.A, x))

    def support(self, xi):
        xi = self._check_dim(xi)
        return np.sqrt(np.einsum("...i,ij,...j->...", xi, self.Ainv, xi))

    def polar(self):
        return Ellipsoid(self.Ainv)

    def scaled(self, c):
        return Ellipsoid(self.A / c**2)

    @property
    def is_smooth(self):
        return True

    def smooth_grad(self, x):
        x = self._check_dim(x)
        g = self.gauge(x)
        g = np.where(g == 0, 1.0, g)
        return (x @ self.A) / (g[..., None] if x.ndim > 1 else g)


# ---------------------------------------------------------------------------
# polytopes


def _pair_antipodes(points, tol):
    """Match points into exact +/- pairs; returns the canonical half-set."""
    pts = np.asarray(points, dtype=float)
    n = len(pts)
    used = np.zeros(n, dtype=bool)
    half = []
    for i in range(n):
        if used[i]:
            continue
        d = np.linalg.norm(pts + pts[i], axis=1)
        d[used] = np.inf
        d[i] = np.inf
        j = int(np.argmin(d))
        if d[j] > tol:
            raise BodyValidationError(
                "point set is not symmetric: no antipode for %s" % pts[i]
            )
        used[i] = used[j] = True
        half.append(0.5 * (pts[i] - pts[j]))
    return np.asarray(half)


def _ccw_order(verts):
    ang = np.arctan2(verts[:, 1], verts[:, 0])
    return verts[np.argsort(ang)]


def _validate_polygon(verts):
    n = len(verts)
    if n < 4:
        raise BodyValidationError("a symmetric polygon needs at least 4 vertices")
    for i in range(n):
        a, b, c = verts[i - 1], verts[i], verts[(i + 1) % n]
        cross = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        if cross <= 1e-12 * (np.linalg.norm(b - a) * np.linalg.norm(c - a) + 1e-30):
            raise BodyValidationError(
                "polygon vertices must be in strictly convex ccw position"
            )


class _Polytope(ConvexBody):
    """Shared storage: vertex list and facet list, both antipodally paired."""

    smoothing_power = 64

    def _init_reps(self, verts, normals, offsets):
        if verts.shape[1] == 2:
            verts = _ccw_order(verts)
        self._verts = verts
        self._normals = normals
        self._offsets = offsets
        self.dim = verts.shape[1]
        # one facet of each antipodal pair, for the smoothed gauge
        half = _pair_antipodes(normals / offsets[:, None], 1e-9)
        self._smooth = _SmoothFacets(half, self.smoothing_power)

    @property
    def vertices(self):
        return self._verts

    @property
    def facet_normals(self):
        return self._normals

    @property
    def facet_offsets(self):
        return self._offsets

    def gauge(self, x):
        x = self._check_dim(x)
        return np.max((x @ self._normals.T) / self._offsets, axis=-1)

    def support(self, xi):
        xi = self._check_dim(xi)
        return np.max(xi @ self._verts.T, axis=-1)

    def smooth_gauge(self, x):
        return self._smooth.smooth_gauge(self._check_dim(x))

    def smooth_grad(self, x):
        return self._smooth.smooth_grad(self._check_dim(x))

    def area(self):
        if self.dim != 2:
            raise ValueError("area is a 2d operation")
        v = self._verts
        return 0.5 * abs(
            np.sum(v[:, 0] * np.roll(v[:, 1], -1) - np.roll(v[:, 0], -1) * v[:, 1])
        )

    def vertex_angles(self):
        if self.dim != 2:
            raise ValueError("vertex angles are a 2d notion")
        return np.sort(np.mod(np.arctan2(self._verts[:, 1], self._verts[:, 0]), 2 * np.pi))


def _hull_facets(verts):
    hull = ConvexHull(verts)
    if len(hull.vertices) != len(verts):
        raise BodyValidationError("vertex list contains non-extreme points")
    normals = hull.equations[:, :-1]
    offsets = -hull.equations[:, -1]
    if np.any(offsets <= 1e-12):
        raise BodyValidationError("origin is not strictly interior")
    return normals, offsets


class PolytopeV(_Polytope):
    """Symmetric polytope given by its vertices (dim 2 or 3)."""

    def __init__(self, vertices, _facets=None):
        verts = np.asarray(vertices, dtype=float)
        if verts.ndim != 2 or verts.shape[1] not in (2, 3):
            raise BodyValidationError("vertices must be an (m, 2) or (m, 3) array")
        if _facets is None:
            half = _pair_antipodes(verts, 1e-9)
            verts = np.vstack([half, -half])
            if verts.shape[1] == 2:
                verts = _ccw_order(verts)
                _validate_polygon(verts)
            normals, offsets = _hull_facets(verts)
        else:
            normals, offsets = _facets
        self._init_reps(verts, normals, offsets)

    def __repr__(self):
        return "PolytopeV(dim=%d, nverts=%d)" % (self.dim, len(self._verts))

    def polar(self):
        # conv(V)^o = {xi : <v, xi> <= 1}; its vertices are the scaled facets
        return PolytopeH(
            self._verts,
            np.ones(len(self._verts)),
            _verts=self._normals / self._offsets[:, None],
        )

    def scaled(self, c):
        return PolytopeV(self._verts * c)


class PolytopeH(_Polytope):
    """Symmetric polytope given by facets <u_i, x> <= h_i (dim 2 or 3)."""

    def __init__(self, normals, offsets, _verts=None):
        U = np.asarray(normals, dtype=float)
        h = np.asarray(offsets, dtype=float)
        if U.ndim != 2 or U.shape[1] not in (2, 3) or h.shape != (len(U),):
            raise BodyValidationError("facets must be (m, d) normals with m offsets")
        if np.any(h <= 0):
            raise BodyValidationError("facet offsets must be positive")
        if _verts is None:
            # canonicalize through the polar vertex set u_i / h_i
            pol = PolytopeV(U / h[:, None])
            U = pol.vertices
            h = np.ones(len(U))
            verts = pol.facet_normals / pol.facet_offsets[:, None]
        else:
            verts = _verts
        self._init_reps(verts, U, h)

    def __repr__(self):
        return "PolytopeH(dim=%d, nfacets=%d)" % (self.dim, len(self._normals))

    def polar(self):
        return PolytopeV(
            self._normals / self._offsets[:, None],
            _facets=(self._verts, np.ones(len(self._verts))),
        )

    def scaled(self, c):
        return PolytopeH(self._normals, self._offsets * c)


# ---------------------------------------------------------------------------
# classical 2d functionals


def body_area(body):
    """Area of a 2d body: shoelace for polygons, closed form for ellipses,
    adaptive radial quadrature otherwise (relative error <= 1e-8)."""
    if body.dim != 2:
        raise ValueError("area is a 2d operation")
    if isinstance(body, _Polytope):
        return body.area()
    if isinstance(body, Ellipsoid):
        return np.pi / np.sqrt(np.linalg.det(body.A))
    val, _ = quad(
        lambda t: 0.5 / body.gauge(np.array([np.cos(t), np.sin(t)])) ** 2,
        0.0,
        2 * np.pi,
        epsabs=0.0,
        epsrel=1e-10,
        limit=200,
    )
    return val


def mahler_volume(body):
    """|B| * |B polar| for a 2d body."""
    if body.dim != 2:
        raise ValueError("mahler volume implemented for dimension 2")
    return body_area(body) * body_area(body.polar())


class EllipseFit:
    """Origin-centered ellipse {x : x^T A x <= 1} fitted to a body."""

    def __init__(self, shape_form, kind):
        self.shape = np.asarray(shape_form, dtype=float)
        if kind not in ("inscribed-max-area", "circumscribed-min-area"):
            raise ValueError("unknown ellipse fit kind %r" % kind)
        self.kind = kind

    @property
    def area(self):
        return np.pi / np.sqrt(np.linalg.det(self.shape))

    def as_body(self):
        return Ellipsoid(self.shape)


def _mvee_centered(points, tol=1e-10, max_iter=100_000):
    """Minimum-area origin-centered ellipse covering the given points.

    Khachiyan / Frank-Wolfe iteration on the weights; stops when the
    optimality gap max_i M_i - d is below d*1e-12, the weight step is
    below tol, or the iteration cap is hit.
    """
    P = np.asarray(points, dtype=float)
    n, d = P.shape
    u = np.full(n, 1.0 / n)
    for _ in range(max_iter):
        V = (P * u[:, None]).T @ P
        M = np.einsum("ij,jk,ik->i", P, np.linalg.inv(V), P)
        j = int(np.argmax(M))
        mj = M[j]
        if mj <= d * (1.0 + 1e-12):
            break
        step = (mj - d) / (d * (mj - 1.0))
        new_u = (1.0 - step) * u
        new_u[j] += step
        if np.linalg.norm(new_u - u) < tol and mj <= d * (1.0 + 1e-9):
            u = new_u
            break
        u = new_u
    V = (P * u[:, None]).T @ P
    return np.linalg.inv(V) / d


def _fit_point_set(body, sample_count):
    if isinstance(body, _Polytope):
        return body.vertices
    return boundary_sample(body, sample_count)


def loewner_ellipse(body, sample_count=1024):
    """Minimal-area enclosing ellipse (exact for polytopes, sampled for
    smooth bodies)."""
    if body.dim != 2:
        raise ValueError("ellipse fits implemented for dimension 2")
    A = _mvee_centered(_fit_point_set(body, sample_count))
    return EllipseFit(A, "circumscribed-min-area")


def john_ellipse(body, sample_count=1024):
    """Maximal-area inscribed ellipse, via the polar of the enclosing
    ellipse of the polar body."""
    if body.dim != 2:
        raise ValueError("ellipse fits implemented for dimension 2")
    outer = loewner_ellipse(body.polar(), sample_count)
    return EllipseFit(np.linalg.inv(outer.shape), "inscribed-max-area")


def volume_ratio(body, sample_count=1024):
    """vr(B) = sqrt(|B| / |E|) with E the maximal inscribed ellipse.

    The normalization (2d square root) is fixed by the role the ratio
    plays in the girth lower bound; see geodesy.girth_lower_bound.
    """
    if body.dim != 2:
        raise ValueError("volume ratio implemented for dimension 2")
    return np.sqrt(body_area(body) / john_ellipse(body, sample_count).area)


# ---------------------------------------------------------------------------
# sampling and distances


_ICO_CACHE = {}


def _icosphere(level):
    """Vertex set of the level-times subdivided icosahedron, on the unit
    sphere, closed under exact negation."""
    if level in _ICO_CACHE:
        return _ICO_CACHE[level]
    verts, _ = icosphere_mesh(level)
    half = _pair_antipodes(verts, 1e-9)
    verts = np.vstack([half, -half])
    _ICO_CACHE[level] = verts
    return verts


def _subdivide(verts, faces):
    verts = list(map(tuple, verts))
    index = {v: i for i, v in enumerate(verts)}
    cache = {}

    def midpoint(i, j):
        key = (min(i, j), max(i, j))
        if key in cache:
            return cache[key]
        m = 0.5 * (np.asarray(verts[i]) + np.asarray(verts[j]))
        m = tuple(m / np.linalg.norm(m))
        if m not in index:
            index[m] = len(verts)
            verts.append(m)
        cache[key] = index[m]
        return cache[key]

    new_faces = []
    for a, b, c in faces:
        ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
        new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
    return np.asarray(verts), np.asarray(new_faces)


def icosphere_mesh(level):
    """(vertices, faces) of the subdivided icosahedron on the unit sphere."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    base = []
    for i in (-1.0, 1.0):
        for j in (-phi, phi):
            base.append((0.0, i, j))
            base.append((i, j, 0.0))
            base.append((j, 0.0, i))
    verts = np.array(base)
    verts /= np.linalg.norm(verts, axis=1)[:, None]
    faces = ConvexHull(verts).simplices
    for _ in range(level):
        verts, faces = _subdivide(verts, faces)
    # orient all faces outward
    c = verts[faces].mean(axis=1)
    n = np.cross(verts[faces[:, 1]] - verts[faces[:, 0]], verts[faces[:, 2]] - verts[faces[:, 0]])
    flip = np.einsum("ij,ij->i", c, n) < 0
    faces = faces.copy()
    faces[flip] = faces[flip][:, ::-1]
    return verts, faces


def boundary_sample(body, count):
    """Quasi-uniform antipodally closed sample of the boundary.

    2d: evenly spaced angles (count rounded up to even). 3d: subdivided
    icosahedron directions, smallest level with at least `count` vertices.
    Directions are scaled by 1/gauge, so antipodal closure is exact.
    """
    if count < 8:
        raise ValueError("need at least 8 sample points")
    if body.dim == 2:
        half = (count + 1) // 2
        theta = np.arange(half) * np.pi / half
        dirs_half = np.stack([np.cos(theta), np.sin(theta)], axis=1)
        dirs = np.vstack([dirs_half, -dirs_half])
    elif body.dim == 3:
        level = 0
        while len(_icosphere(level)) < count:
            level += 1
        dirs = _icosphere(level)
    else:
        raise ValueError("boundary sampling implemented for dimensions 2 and 3")
    return dirs / body.gauge(dirs)[:, None]


def hausdorff_distance(b1, b2, n_dirs=8192):
    """sup over directions of |support difference|; this is the Hausdorff
    distance for symmetric bodies. Sampled with golden-ratio refinement of
    the best direction."""
    if b1.dim != b2.dim:
        raise ValueError("bodies must share a dimension")
    if b1.dim == 2:
        theta = np.arange(n_dirs) * 2 * np.pi / n_dirs
        dirs = np.stack([np.cos(theta), np.sin(theta)], axis=1)
        vals = np.abs(b1.support(dirs) - b2.support(dirs))
        j = int(np.argmax(vals))
        f = lambda t: -abs(
            b1.support(np.array([np.cos(t), np.sin(t)]))
            - b2.support(np.array([np.cos(t), np.sin(t)]))
        )
        lo, hi = theta[j] - 2 * np.pi / n_dirs, theta[j] + 2 * np.pi / n_dirs
        t, val = _golden_max(f, lo, hi)
        return max(vals[j], -val)
    dirs = _icosphere(4)
    vals = np.abs(b1.support(dirs) - b2.support(dirs))
    j = int(np.argmax(vals))
    best, bestval = dirs[j], vals[j]
    step = 0.1
    for _ in range(40):
        probes = best[None, :] + step * np.vstack([np.eye(3), -np.eye(3)])
        probes /= np.linalg.norm(probes, axis=1)[:, None]
        pv = np.abs(b1.support(probes) - b2.support(probes))
        k = int(np.argmax(pv))
        if pv[k] > bestval:
            best, bestval = probes[k], pv[k]
        else:
            step *= 0.5
    return bestval


def _golden_max(f, lo, hi, iters=60):
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(iters):
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    t = 0.5 * (a + b)
    return t, min(fc, fd)


# ---------------------------------------------------------------------------
# constructors used by tests and the cli


def square2d(half_width=1.0):
    w = half_width
    return PolytopeV([[w, w], [-w, w], [-w, -w], [w, -w]])


def cross_polytope2d(radius=1.0):
    r = radius
    return PolytopeV([[r, 0.0], [0.0, r], [-r, 0.0], [0.0, -r]])


def euclidean_ball(dim, radius=1.0):
    return LpBall(2.0, dim, radius)


def random_symmetric_polygon(rng, n_half=5, radius_range=(0.5, 1.5)):
    """Random symmetric polygon: n_half random boundary rays plus their
    negations, convexified."""
    for _ in range(200):
        theta = np.sort(rng.uniform(0.0, np.pi, n_half))
        r = rng.uniform(*radius_range, n_half)
        pts = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
        pts = np.vstack([pts, -pts])
        try:
            hull = ConvexHull(pts)
            return PolytopeV(pts[hull.vertices])
        except BodyValidationError:
            continue
    raise RuntimeError("failed to draw a valid random polygon")


def rotate90(body):
    """The 2d body rotated by 90 degrees; rot90(polar(K)) is the unique
    norming body for which quotient and immersion metrics agree on the
    boundary of K."""
    R = np.array([[0.0, -1.0], [1.0, 0.0]])
    if isinstance(body, PolytopeV):
        return PolytopeV(body.vertices @ R.T)
    if isinstance(body, PolytopeH):
        return PolytopeH(body.facet_normals @ R.T, body.facet_offsets)
    if isinstance(body, Ellipsoid):
        return Ellipsoid(R @ body.A @ R.T)
    if isinstance(body, LpBall):
        return body  # lp balls are invariant under coordinate rotation by 90
    raise ValueError("unsupported body class")


def isoperimetrix(body):
    """rot90 of the polar body (2d)."""
    if body.dim != 2:
        raise ValueError("isoperimetrix is a 2d notion")
    return rotate90(body.polar())
