"""Quotient and immersion Finsler structures on a convex boundary.

The quotient norm at a boundary point m of K, against a norming body L, is
inf_t gauge_L(v + t*m): the norm v inherits from V_L / span(m). Its dual,
under the identification of the cotangent space with the annihilator of m,
is the polar gauge of L restricted to that hyperplane. The co-sphere bundle
is therefore carried by pairs (q, p) with q on the boundary of K, p on the
boundary of L polar, and p(q) = 0.
"""

from dataclasses import dataclass

import numpy as np

from .bodies import ConvexBody

INCIDENCE_TOL = 1e-9

_INVPHI = (np.sqrt(5.0) - 1.0) / 2.0


class TangencyError(ValueError):
    """Raised when an operation requires a tangent vector or covector and
    the input fails the incidence test."""


@dataclass
class CoState:
    """A point of the co-sphere bundle: q on bd K, p on bd L polar, p(q)=0."""

    q: np.ndarray
    p: np.ndarray
    degenerate: bool = False

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float)
        self.p = np.asarray(self.p, dtype=float)


class SurfaceMetric:
    """Finsler structure on the boundary of `base`, induced by `norming`."""

    def __init__(self, base: ConvexBody, norming: ConvexBody, kind="quotient"):
        if base.dim != norming.dim:
            raise ValueError("base and norming bodies must share a dimension")
        if kind not in ("quotient", "immersion"):
            raise ValueError("kind must be 'quotient' or 'immersion'")
        self.base = base
        self.norming = norming
        self.kind = kind
        self.polar_norming = norming.polar()
        self.dim = base.dim

    def dual(self):
        """The metric on bd(L polar) normed by K polar; same girth, same
        Holmes-Thompson volume."""
        return SurfaceMetric(self.norming.polar(), self.base.polar(), self.kind)

    def norm(self, m, v):
        if self.kind == "quotient":
            return quotient_norm(self, m, v)
        return immersion_norm(self, m, v)


def _canonical_sign(m):
    """Sign making the first nonzero coordinate of m positive, batched.

    Flipping (m, v) -> (-m, -v) leaves the quotient objective bitwise
    unchanged, which makes the antipodal isometry exact in floating point.
    """
    m = np.atleast_2d(m)
    s = np.zeros(m.shape[0])
    for j in range(m.shape[1]):
        fill = s == 0
        s[fill] = np.sign(m[fill, j])
    s[s == 0] = 1.0
    return s


def quotient_norm_many(metric, m, v, iters=40):
    """Vectorized quotient norm over stacked rows of (m, v).

    40 golden-section iterations localize t to ~4e-9 of the bracket and
    the value, quadratic around the minimum, to better than 1e-15
    relative; callers on hot paths may lower `iters`.
    """
    m = np.atleast_2d(np.asarray(m, dtype=float))
    v = np.atleast_2d(np.asarray(v, dtype=float))
    m, v = np.broadcast_arrays(m, v)
    s = _canonical_sign(m)[:, None]
    m = s * m
    v = s * v
    gauge = metric.norming.gauge
    gv = gauge(v)
    gm = gauge(m)
    out = np.zeros(len(m))
    live = gv > 0
    if not np.any(live):
        return out
    ml, vl = m[live], v[live]
    T = 2.0 * gv[live] / gm[live]
    # the objective f(t) = gauge_L(v + t m) is convex and f(+-T) >= f(0),
    # so the minimizer is interior to [-T, T]
    a, b = -T, T
    f = lambda t: gauge(vl + t[:, None] * ml)
    for _ in range(iters):
        c = b - _INVPHI * (b - a)
        d = a + _INVPHI * (b - a)
        left = f(c) < f(d)
        b = np.where(left, d, b)
        a = np.where(left, a, c)
    t = 0.5 * (a + b)
    out[live] = f(t)
    return out


def _golden_argmin(metric, m, v):
    """Scalar golden section returning (value, argmin t)."""
    gauge = metric.norming.smooth_gauge if _needs_smoothing(metric) else metric.norming.gauge
    gv = gauge(v)
    if gv == 0:
        return 0.0, 0.0
    T = 2.0 * gv / gauge(m)
    a, b = -T, T
    f = lambda t: gauge(v + t * m)
    c = b - _INVPHI * (b - a)
    d = a + _INVPHI * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(78):
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - _INVPHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INVPHI * (b - a)
            fd = f(d)
    t = 0.5 * (a + b)
    return min(fc, fd), t


def _needs_smoothing(metric):
    return not metric.norming.is_smooth


def quotient_norm(metric, m, v):
    """inf over t of gauge_L(v + t m). v need not be tangent: adding
    multiples of m is free."""
    m = np.asarray(m, dtype=float)
    v = np.asarray(v, dtype=float)
    if m.ndim == 1:
        return float(quotient_norm_many(metric, m[None, :], v[None, :])[0])
    return quotient_norm_many(metric, m, v)


def normal_covector(body, m):
    """The supporting covector at a boundary point: the gradient of the
    gauge for smooth bodies, the active facet for polytopes."""
    m = np.asarray(m, dtype=float)
    if body.is_smooth:
        return body.smooth_grad(m)
    if hasattr(body, "facet_normals"):
        vals = (m @ body.facet_normals.T) / body.facet_offsets
        j = int(np.argmax(vals))
        return body.facet_normals[j] / body.facet_offsets[j]
    return body.smooth_grad(m)


def immersion_norm(metric, m, v, tol=1e-7):
    """gauge_L(v) for v tangent to bd K at m; non-tangent input is an error."""
    m = np.asarray(m, dtype=float)
    v = np.asarray(v, dtype=float)
    xi = normal_covector(metric.base, m)
    gv = metric.norming.gauge(v)
    if gv > 0 and abs(float(np.dot(xi, v))) > tol * gv * max(
        1.0, float(np.linalg.norm(xi))
    ):
        raise TangencyError("vector is not tangent to the surface at m")
    return float(gv)


def dual_quotient_norm(metric, m, xi):
    """Norm of a cotangent functional, given as the ambient covector that
    annihilates m. This is gauge of L polar on the annihilator slice."""
    m = np.asarray(m, dtype=float)
    xi = np.asarray(xi, dtype=float)
    scale = float(np.linalg.norm(xi)) * float(np.linalg.norm(m))
    if scale > 0 and abs(float(np.dot(xi, m))) > 1e-7 * scale:
        raise TangencyError("covector does not annihilate the base point")
    return float(metric.polar_norming.gauge(xi))


def tangent_basis(m):
    """Orthonormal (reference metric) basis of the hyperplane m-perp,
    a convenient chart scaffold for sampling tangent data."""
    m = np.asarray(m, dtype=float)
    n = len(m)
    basis = []
    mhat = m / np.linalg.norm(m)
    for e in np.eye(n):
        w = e - mhat * np.dot(mhat, e)
        for b in basis:
            w = w - b * np.dot(b, w)
        nw = np.linalg.norm(w)
        if nw > 1e-8:
            basis.append(w / nw)
        if len(basis) == n - 1:
            break
    return np.asarray(basis)


def legendre(metric, m, v):
    """The unit supporting covector of the quotient norm at (m, v).

    Returns the co-state (q=m, p) with p on bd(L polar), p(m) = 0 and
    <p, v> = quotient_norm(m, v). With w = v + t*m at the optimal t, the
    gauge gradient of L at w annihilates m (optimality), pairs with v to
    the norm value (Euler identity), and lies on the polar boundary, so p
    is read off the gradient directly. Polytope norming bodies go through
    the smoothed gauge.
    """
    if metric.kind != "quotient":
        raise ValueError("legendre is defined for the quotient structure")
    m = np.asarray(m, dtype=float)
    v = np.asarray(v, dtype=float)
    base = metric.base
    q = m / base.gauge(m)
    val, tstar = _golden_argmin(metric, q, v)
    if val == 0.0:
        raise ValueError("legendre of the zero vector is undefined")
    # golden section localizes t only to sqrt(eps); polish the optimality
    # condition <grad gauge(v + t q), q> = 0 with a few Newton steps
    grad = metric.norming.smooth_grad
    h = 1e-6 * (1.0 + abs(tstar))
    for _ in range(8):
        g0 = float(np.dot(grad(v + tstar * q), q))
        if abs(g0) < 1e-14:
            break
        gp = float(np.dot(grad(v + (tstar + h) * q), q))
        gm_ = float(np.dot(grad(v + (tstar - h) * q), q))
        slope = (gp - gm_) / (2.0 * h)
        if not np.isfinite(slope) or slope <= 0:
            break
        tstar = tstar - g0 / slope
    w = v + tstar * q
    val = float(
        metric.norming.smooth_gauge(w)
        if _needs_smoothing(metric)
        else metric.norming.gauge(w)
    )
    p = metric.norming.smooth_grad(w)
    # flat spot detection: a wide near-optimal t interval means the
    # supporting covector is not unique
    span = 2.0 * metric.norming.gauge(v) / metric.norming.gauge(q)
    delta = 1e-3 * span
    gauge = metric.norming.smooth_gauge if _needs_smoothing(metric) else metric.norming.gauge
    flat = (
        gauge(v + (tstar + delta) * q) - val < 1e-12 * val
        and gauge(v + (tstar - delta) * q) - val < 1e-12 * val
    )
    return CoState(q=q, p=np.asarray(p, dtype=float), degenerate=bool(flat))


def validate_costate(metric, c: CoState, tol=INCIDENCE_TOL, smooth=False):
    """Check the co-sphere membership of (q, p) for this metric."""
    base_gauge = metric.base.smooth_gauge if smooth else metric.base.gauge
    dual_gauge = (
        metric.polar_norming.smooth_gauge if smooth else metric.polar_norming.gauge
    )
    errs = (
        abs(float(base_gauge(c.q)) - 1.0),
        abs(float(dual_gauge(c.p)) - 1.0),
        abs(float(np.dot(c.p, c.q))),
    )
    return max(errs) <= tol, errs


def cosphere_swap(c: CoState) -> CoState:
    """(q, p) -> (p, q): a co-state for (K, L) becomes one for (L°, K°).

    Involutive; preserves the incidence p(q) = 0 on the nose.
    """
    return CoState(q=c.p, p=c.q, degenerate=c.degenerate)


def double_fibration_check(K, L, q, p, tol=1e-7):
    """Whether (Lq, Lp) lands on the incidence variety of the dual pair:
    <grad gauge_K(q), grad gauge_{L°}(p)> = 0 within tolerance."""
    gq = K.smooth_grad(np.asarray(q, dtype=float))
    gp = L.polar().smooth_grad(np.asarray(p, dtype=float))
    scale = float(np.linalg.norm(gq) * np.linalg.norm(gp))
    return abs(float(np.dot(gq, gp))) <= tol * max(scale, 1e-30)
