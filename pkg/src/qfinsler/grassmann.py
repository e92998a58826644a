"""Oriented Grassmannians carrying the quotient operator-norm structure.

Points are oriented k-planes, stored as reference-orthonormal frames plus
an orientation sign; the tangent space at a plane is Hom(plane, V/plane),
represented by an (n-k) x k matrix in frame/complement bases. A norm on
Hom(V, V) induces the tangent norm by quotient and the cotangent norm by
restriction of the trace dual to {T : Im T inside the plane inside Ker T}.

The reference inner product is chart scaffolding only: every metric value
comes from the chosen operator norm.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import null_space
from scipy.optimize import linprog

from .bodies import ConvexBody, boundary_sample


class RankDriftError(RuntimeError):
    """A flow trajectory changed numerical rank, which contradicts the
    conserved-rank property of the lifted geodesics."""


class GrassFlowError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# points and cotangents


def _orient_qr(M):
    """QR with positive diagonal, so the frame depends continuously on M."""
    Q, R = np.linalg.qr(M)
    s = np.sign(np.diag(R))
    s[s == 0] = 1.0
    return Q * s


def _image_basis(T, r):
    """Orthonormal basis of the range of T (rank r), via SVD."""
    U, s, _ = np.linalg.svd(T)
    return U[:, :r]


@dataclass
class GrassPoint:
    """Oriented k-plane: orthonormal frame columns plus orientation sign."""

    frame: np.ndarray
    sign: int = 1

    def __post_init__(self):
        self.frame = np.asarray(self.frame, dtype=float)
        if self.frame.ndim == 1:
            self.frame = self.frame[:, None]
        if self.sign not in (1, -1):
            raise ValueError("orientation sign must be +1 or -1")
        gram = self.frame.T @ self.frame
        if np.max(np.abs(gram - np.eye(self.frame.shape[1]))) > 1e-10:
            raise ValueError("frame columns must be orthonormal")

    @property
    def n(self):
        return self.frame.shape[0]

    @property
    def k(self):
        return self.frame.shape[1]

    def antipode(self):
        return GrassPoint(self.frame, -self.sign)

    def projector(self):
        return self.frame @ self.frame.T

    def complement(self):
        """Orthonormal basis of the orthogonal complement."""
        return null_space(self.frame.T)

    def same_oriented(self, other, tol=1e-8):
        if self.k != other.k or self.n != other.n:
            return False
        M = self.frame.T @ other.frame
        d = float(np.linalg.det(M))
        if subspace_angle(self.frame, other.frame) > tol:
            return False
        return np.sign(d) * self.sign * other.sign > 0


def from_spanning(vectors, sign=1):
    """GrassPoint from a spanning set (columns); orientation follows the
    column order of the orthonormalized frame."""
    M = np.asarray(vectors, dtype=float)
    if M.ndim == 1:
        M = M[:, None]
    return GrassPoint(_orient_qr(M)[:, : M.shape[1]], sign)


def haar_point(rng, n, k):
    return from_spanning(rng.normal(size=(n, k)))


def subspace_angle(F1, F2):
    """Largest principal angle between the column spans; the inputs need
    not be orthonormal."""
    def orth(F):
        U, s, _ = np.linalg.svd(np.atleast_2d(F), full_matrices=False)
        r = int(np.sum(s > 1e-12 * (s[0] if len(s) else 1.0)))
        return U[:, :r]

    A, B = orth(F1), orth(F2)
    if A.shape[1] == 0 or B.shape[1] == 0:
        return 0.0 if A.shape[1] == B.shape[1] else np.pi / 2
    s = np.linalg.svd(A.T @ B, compute_uv=False)
    return float(np.arccos(np.clip(s.min(), -1.0, 1.0)))


@dataclass
class GrassCotangent:
    """Cotangent vector at a plane: T with Im(T) in the plane in Ker(T)."""

    point: GrassPoint
    T: np.ndarray

    def __post_init__(self):
        self.T = np.asarray(self.T, dtype=float)

    def validate(self, tol=1e-9):
        P = self.point.projector()
        scale = max(np.linalg.norm(self.T), 1e-30)
        errs = (
            np.linalg.norm(self.T @ self.T) / scale**2,
            np.linalg.norm(self.T - P @ self.T) / scale,
            np.linalg.norm(self.T @ P) / scale,
        )
        return max(errs) <= tol, errs


# ---------------------------------------------------------------------------
# the operator-norm menu


class OperatorNormSpec:
    """A norm on Hom(V, V): Hilbert-Schmidt, spectral, trace, or the
    K-to-L operator gauge sup_{x in K} gauge_L(T x)."""

    EUCLIDEAN = ("hs", "spectral", "trace")

    def __init__(self, kind, K: ConvexBody = None, L: ConvexBody = None, samples=256):
        kind = kind.lower()
        if kind in ("hilbertschmidt", "hilbert-schmidt", "frobenius"):
            kind = "hs"
        if kind in ("nuclear",):
            kind = "trace"
        if kind not in ("hs", "spectral", "trace", "opgauge"):
            raise ValueError("unknown operator norm %r" % kind)
        self.kind = kind
        self.K = K
        self.L = L
        if kind == "opgauge":
            if K is None or L is None:
                raise ValueError("opgauge needs the two bodies")
            if K.dim != L.dim:
                raise ValueError("bodies must share a dimension")
            if hasattr(K, "vertices"):
                self._probe = K.vertices
            elif K.dim in (2, 3):
                self._probe = boundary_sample(K, samples)
            else:
                rng = np.random.default_rng(11)
                dirs = rng.normal(size=(samples, K.dim))
                dirs = np.vstack([dirs, -dirs, np.eye(K.dim), -np.eye(K.dim)])
                self._probe = dirs / K.gauge(dirs)[:, None]

    def __repr__(self):
        if self.kind == "opgauge":
            return "OperatorNormSpec(opgauge, %r -> %r)" % (self.K, self.L)
        return "OperatorNormSpec(%s)" % self.kind

    @property
    def is_euclidean(self):
        return self.kind in self.EUCLIDEAN


def op_norm(beta: OperatorNormSpec, T):
    """The norm beta evaluated on an operator."""
    T = np.asarray(T, dtype=float)
    if beta.kind == "hs":
        return float(np.linalg.norm(T))
    if beta.kind == "spectral":
        return float(np.linalg.svd(T, compute_uv=False)[0])
    if beta.kind == "trace":
        return float(np.sum(np.linalg.svd(T, compute_uv=False)))
    return float(np.max(beta.L.gauge(beta._probe @ T.T)))


def dual_norm(beta: OperatorNormSpec, S):
    """Trace-dual norm: sup{tr(S T) : beta(T) <= 1}.

    Closed forms for the Euclidean menu; an exact linear program over the
    facet constraints for the polytope operator gauge, and an LP over
    sampled constraints otherwise.
    """
    S = np.asarray(S, dtype=float)
    if beta.kind == "hs":
        return float(np.linalg.norm(S))
    if beta.kind == "spectral":
        return float(np.sum(np.linalg.svd(S, compute_uv=False)))
    if beta.kind == "trace":
        return float(np.linalg.svd(S, compute_uv=False)[0])
    T, val = _opgauge_dual_lp(beta, S)
    return val


def _opgauge_dual_lp(beta, S):
    """Maximize tr(S T) over {T : T K inside L} via linear programming.

    Constraints are gauge_L(T x_i) <= 1 at the K-probe points; for
    polytope K and L this is the exact dual ball.
    """
    n = S.shape[0]
    L = beta.L
    if hasattr(L, "facet_normals"):
        U = L.facet_normals / L.facet_offsets[:, None]
    else:
        U = boundary_sample(L.polar(), 256)
    X = beta._probe
    # rows: <u_j, T x_i> <= 1 for all probe points and facets
    A = np.einsum("ja,ib->jiab", U, X).reshape(len(U) * len(X), n * n)
    b = np.ones(len(A))
    c = -S.T.reshape(n * n)  # tr(S T) = sum_ab S[a,b] T[b,a]
    res = linprog(c, A_ub=A, b_ub=b, bounds=[(None, None)] * (n * n), method="highs")
    if not res.success:
        raise RuntimeError("operator gauge dual LP failed: %s" % res.message)
    T = res.x.reshape(n, n)
    return T, float(-res.fun)


def rank1_dual(beta: OperatorNormSpec, u, v):
    """dual norm of the rank-one operator u v^T, batched over rows.

    All three Euclidean norms restrict to |u| |v| on rank one; for the
    K-to-L operator gauge the trace dual is the nuclear crossnorm, whose
    rank-one value is gauge_K(u) * gauge_polar_L(v).
    """
    u = np.atleast_2d(np.asarray(u, dtype=float))
    v = np.atleast_2d(np.asarray(v, dtype=float))
    if beta.is_euclidean:
        return np.linalg.norm(u, axis=-1) * np.linalg.norm(v, axis=-1)
    return beta.K.gauge(u) * beta.L.polar().gauge(v)


# ---------------------------------------------------------------------------
# induced norms on tangent and cotangent spaces


def _ambient_from_blocks(point: GrassPoint, A, Bb, C, D):
    Q = point.frame
    Qp = point.complement()
    U = np.hstack([Q, Qp])
    k = point.k
    n = point.n
    F = np.zeros((n, n))
    F[:k, :k] = A
    F[:k, k:] = Bb
    F[k:, :k] = C
    F[k:, k:] = D
    return U @ F @ U.T


def quotient_tangent_norm(beta: OperatorNormSpec, point: GrassPoint, f, info=None):
    """Quotient norm of a tangent vector f ((n-k) x k matrix).

    inf beta(F) over ambient operators F restricted-and-projected to f.
    Unitarily invariant norms contract under orthogonal projection and
    inclusion, so the infimum is attained on the block completion by
    zero; the operator gauge goes through a subgradient descent with
    Polyak steps and random restarts, certified by trace-dual lower
    bounds.
    """
    f = np.asarray(f, dtype=float)
    if f.ndim == 1:
        f = f[:, None]
    k = point.k
    n = point.n
    if f.shape != (n - k, k):
        raise ValueError("tangent must be (n-k) x k in frame/complement bases")
    if beta.kind == "hs":
        return float(np.linalg.norm(f))
    if beta.kind == "spectral":
        return float(np.linalg.svd(f, compute_uv=False)[0]) if f.size else 0.0
    if beta.kind == "trace":
        return float(np.sum(np.linalg.svd(f, compute_uv=False)))
    return _quotient_norm_descent(beta, point, f, info)


def _quotient_norm_descent(
    beta, point, f, info=None, restarts=8, iters=600, seed=1234
):
    """Polyak subgradient descent over the free blocks (A, B, D)."""
    rng = np.random.default_rng(seed)
    k = point.k
    n = point.n
    X = beta._probe
    L = beta.L
    Q = point.frame
    Qp = point.complement()
    U = np.hstack([Q, Qp])

    def value_and_subgrad(A, Bb, D):
        F = np.zeros((n, n))
        F[:k, :k] = A
        F[:k, k:] = Bb
        F[k:, :k] = f
        F[k:, k:] = D
        Famb = U @ F @ U.T
        y = X @ Famb.T
        gl = L.gauge(y)
        j = int(np.argmax(gl))
        # subgradient of gauge_L(F x_j) in F is (grad gauge_L at y_j) x_j^T
        gL = L.smooth_grad(y[j]) if not hasattr(L, "facet_normals") else None
        if gL is None:
            vals = (y[j] @ L.facet_normals.T) / L.facet_offsets
            jj = int(np.argmax(vals))
            gL = L.facet_normals[jj] / L.facet_offsets[jj]
        Gamb = np.outer(gL, X[j])
        G = U.T @ Gamb @ U
        return float(gl[j]), G[:k, :k], G[:k, k:], G[k:, k:]

    # trace-dual certificate: any T in the cotangent slice with dual norm
    # <= 1 pairs with f below the quotient norm; an upper bound on the
    # dual norm (radius sandwich against the nuclear norm) keeps this
    # cheap while staying a valid lower bound
    sphere = rng.normal(size=(64, n))
    sphere /= np.linalg.norm(sphere, axis=1)[:, None]
    r_K = float(np.min(1.0 / beta.K.gauge(sphere)))
    R_L = float(np.max(1.0 / beta.L.gauge(sphere)))
    # factor 2 absorbs the sampling slack in the radius estimates
    dual_upper_coeff = 2.0 * R_L / r_K
    lower = 0.0
    zk = np.zeros((k, k))
    zc = np.zeros((n - k, k))
    zd = np.zeros((n - k, n - k))
    for _ in range(16):
        C = rng.normal(size=(n - k, k))
        T = _ambient_from_blocks(point, zk, C.T, zc, zd)
        nuc = float(np.sum(np.linalg.svd(T, compute_uv=False)))
        dn = dual_upper_coeff * nuc
        if dn > 1e-12:
            lower = max(lower, float(np.sum(C * f)) / dn)
    lower = abs(lower)

    best = np.inf
    for r in range(restarts):
        if r == 0:
            A = np.zeros((k, k))
            Bb = np.zeros((k, n - k))
            D = np.zeros((n - k, n - k))
        else:
            scale = 0.3 * np.linalg.norm(f) / max(1, n)
            A = rng.normal(size=(k, k)) * scale
            Bb = rng.normal(size=(k, n - k)) * scale
            D = rng.normal(size=(n - k, n - k)) * scale
        val, gA, gB, gD = value_and_subgrad(A, Bb, D)
        best = min(best, val)
        for it in range(iters):
            gnorm2 = np.sum(gA**2) + np.sum(gB**2) + np.sum(gD**2)
            if gnorm2 < 1e-24:
                break
            target = max(lower, 0.97 * best)
            step = (val - target) / gnorm2
            if step <= 0:
                step = 1e-3 / (1 + it)
            A -= step * gA
            Bb -= step * gB
            D -= step * gD
            val, gA, gB, gD = value_and_subgrad(A, Bb, D)
            best = min(best, val)
    if info is not None:
        info["lower_bound"] = lower
        info["gap"] = best - lower
    return best


def cotangent_norm(beta: OperatorNormSpec, cot: GrassCotangent):
    """Norm of a cotangent vector: the trace dual restricted to the
    incidence slice, evaluated directly on T."""
    ok, errs = cot.validate()
    if not ok:
        raise ValueError("invalid cotangent data: %s" % (errs,))
    return dual_norm(beta, cot.T)


def tangent_pairing(cot: GrassCotangent, f):
    """tr(T lift(f)) for a tangent f at the same plane; well defined on
    the incidence slice."""
    Q = cot.point.frame
    Qp = cot.point.complement()
    F = Qp @ np.asarray(f, dtype=float) @ Q.T
    return float(np.trace(cot.T @ F))


def transpose_isometry_check(beta: OperatorNormSpec, n, k, n_samples=8, seed=5, tol=1e-5):
    """Duality of the quotient norms under transposition: the norm of f at
    a plane equals the norm of f^T at the orthogonal complement."""
    if not beta.is_euclidean:
        raise ValueError("transpose isometry needs a transpose-invariant norm")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_samples):
        pt = haar_point(rng, n, k)
        f = rng.normal(size=(n - k, k))
        a = quotient_tangent_norm(beta, pt, f)
        ptc = GrassPoint(pt.complement())
        b = quotient_tangent_norm(beta, ptc, f.T)
        worst = max(worst, abs(a - b) / max(a, 1e-12))
    return worst <= tol


# ---------------------------------------------------------------------------
# distances and girth


def _align_frames(F1, F2):
    """Rotate F2's columns to best match F1 (Procrustes); returns the
    rotated frame and the determinant sign of the rotation."""
    M = F1.T @ F2
    U, _, Vt = np.linalg.svd(M)
    O = (U @ Vt).T
    return F2 @ O.T, float(np.sign(np.linalg.det(O)))


def _midpoint_frame(F1, F2a):
    return _orient_qr(0.5 * (F1 + F2a))[:, : F1.shape[1]]


def _segment_speed(beta, F1, F2):
    """First-order tangent between nearby frames, measured at the chordal
    midpoint; returns the quotient-norm length of the segment."""
    F2a, _ = _align_frames(F1, F2)
    Fm = _midpoint_frame(F1, F2a)
    pt = GrassPoint(Fm)
    Qp = pt.complement()
    f = Qp.T @ (F2a - F1)
    return quotient_tangent_norm(beta, pt, f)


def curve_length_grass(beta, frames):
    """Sum of segment speeds along a frame polyline."""
    return float(
        sum(_segment_speed(beta, frames[i], frames[i + 1]) for i in range(len(frames) - 1))
    )


def principal_path(p1: GrassPoint, p2: GrassPoint, n_points=33):
    """Frame polyline along the principal-angle path from p1 to p2,
    corrected by a pi-rotation in one angle when the carried orientation
    would not match the target orientation."""
    X, Y = p1.frame, p2.frame
    k = p1.k
    M = X.T @ Y
    U, s, Vt = np.linalg.svd(M)
    theta = np.arccos(np.clip(s, -1.0, 1.0))
    XU = X @ U
    # orthonormal directions completing each principal pair
    W = np.zeros_like(XU)
    YV = Y @ Vt.T
    for j in range(k):
        w = YV[:, j] - np.cos(theta[j]) * XU[:, j]
        nw = np.linalg.norm(w)
        if nw > 1e-9:
            W[:, j] = w / nw
        else:
            # angle ~ 0: pick any unit direction orthogonal to the plane
            seed = np.zeros(p1.n)
            seed[int(np.argmin(np.abs(XU[:, j])))] = 1.0
            w = seed - X @ (X.T @ seed)
            if np.linalg.norm(w) < 1e-9:
                w = np.random.default_rng(0).normal(size=p1.n)
                w -= X @ (X.T @ w)
            W[:, j] = w / np.linalg.norm(w)
    carried = p1.sign * np.sign(np.linalg.det(U))
    target = p2.sign * np.sign(np.linalg.det(Vt.T))
    if carried * target < 0:
        # swing the largest angle the long way around to flip orientation
        j = int(np.argmax(theta))
        theta[j] = theta[j] - np.pi
    ts = np.linspace(0.0, 1.0, n_points)
    frames = []
    for t in ts:
        F = XU @ np.diag(np.cos(t * theta)) + W @ np.diag(np.sin(t * theta))
        frames.append(_orient_qr(F)[:, :k])
    return frames


def grass_distance(beta, p1: GrassPoint, p2: GrassPoint, n_points=33, sweeps=60):
    """Discrete geodesic distance with a relaxed witness polyline.

    Initialized on the principal-angle path and relaxed by coordinate
    descent with QR retraction; segment speeds come from the quotient
    tangent norm at chordal midpoints.
    """
    frames = principal_path(p1, p2, n_points)
    frames, length = _relax_grass(beta, frames, sweeps)
    return length, frames


def _relax_grass(beta, frames, sweeps, tol=1e-9):
    frames = [F.copy() for F in frames]
    n, k = frames[0].shape
    step = max(
        1e-3, 2.0 * subspace_angle(frames[0], frames[-1]) / max(len(frames) - 1, 1)
    )
    length = curve_length_grass(beta, frames)
    for _ in range(sweeps):
        improved = 0.0
        for i in range(1, len(frames) - 1):
            F = frames[i]
            Qp = null_space(F.T)
            base = _segment_speed(beta, frames[i - 1], F) + _segment_speed(
                beta, F, frames[i + 1]
            )
            best, best_val = F, base
            for a in range(n - k):
                for b in range(k):
                    for sgn in (1.0, -1.0):
                        G = F.copy()
                        G = G + sgn * step * np.outer(Qp[:, a], np.eye(k)[b])
                        G = _orient_qr(G)[:, :k]
                        val = _segment_speed(beta, frames[i - 1], G) + _segment_speed(
                            beta, G, frames[i + 1]
                        )
                        if val < best_val:
                            best, best_val = G, val
            frames[i] = best
            improved += base - best_val
        if improved < tol:
            step *= 0.5
            if step < 1e-7:
                break
    return frames, curve_length_grass(beta, frames)


def grass_girth(n, k, beta, n_starts=6, seed=2, n_points=33, sweeps=40, refine=4):
    """2 min over sampled planes of the distance to the orientation
    reversal: Haar starts, then pattern-search refinement of the best
    base plane."""
    rng = np.random.default_rng(seed)
    best = np.inf
    best_pt = None
    for _ in range(n_starts):
        pt = haar_point(rng, n, k)
        d, _ = grass_distance(beta, pt, pt.antipode(), n_points, sweeps)
        if d < best:
            best, best_pt = d, pt
    step = 0.2
    for _ in range(refine):
        moved = False
        Qp = best_pt.complement()
        for a in range(best_pt.n - best_pt.k):
            for b in range(best_pt.k):
                for sgn in (1.0, -1.0):
                    F = best_pt.frame + sgn * step * np.outer(
                        Qp[:, a], np.eye(best_pt.k)[b]
                    )
                    cand = GrassPoint(_orient_qr(F)[:, : best_pt.k], best_pt.sign)
                    d, _ = grass_distance(beta, cand, cand.antipode(), n_points, sweeps)
                    if d < best - 1e-12:
                        best, best_pt = d, cand
                        moved = True
        if not moved:
            step *= 0.5
    return 2.0 * best


# ---------------------------------------------------------------------------
# characteristic flow on the cotangent bundle


class SmoothedDual:
    """Dual-norm evaluation blended with Hilbert-Schmidt for flows:
    (1-lam)*HS + lam*beta_dual. lam < 1 keeps the Hamiltonian smooth."""

    def __init__(self, beta: OperatorNormSpec, lam=0.0):
        if beta.kind == "hs":
            lam = 0.0
        if not 0.0 <= lam < 1.0:
            raise ValueError("blend parameter must be in [0, 1)")
        self.beta = beta
        self.lam = float(lam)

    def value(self, T):
        hs = float(np.linalg.norm(T))
        if self.beta.kind == "hs" or self.lam == 0.0:
            return hs
        return (1 - self.lam) * hs + self.lam * dual_norm(self.beta, T)

    def grad(self, T):
        """Gradient with respect to the trace pairing: dval = tr(G dT)."""
        hsn = np.linalg.norm(T)
        Ghs = T.T / hsn if hsn > 0 else np.zeros_like(T)
        if self.beta.kind == "hs" or self.lam == 0.0:
            return Ghs
        lam = self.lam
        if self.beta.kind == "spectral":
            # dual is nuclear: gradient V U^T transposed into trace pairing
            U, _, Vt = np.linalg.svd(T)
            Gd = (U @ Vt).T
        elif self.beta.kind == "trace":
            U, s, Vt = np.linalg.svd(T)
            Gd = np.outer(Vt[0], U[:, 0])
        else:
            Gd = _fd_dual_grad(self.beta, T)
        return (1 - lam) * Ghs + lam * Gd


def _fd_dual_grad(beta, T, h=1e-6):
    G = np.zeros_like(T)
    for i in range(T.shape[0]):
        for j in range(T.shape[1]):
            E = np.zeros_like(T)
            E[i, j] = h
            G[j, i] = (dual_norm(beta, T + E) - dual_norm(beta, T - E)) / (2 * h)
    return G


def _project_cotangent(Q, T):
    P = Q @ Q.T
    return P @ T @ (np.eye(len(P)) - P)


def grass_characteristic_flow(
    beta, start: GrassCotangent, duration, step, lam=0.0, drift_tol=1e-5
):
    """RK4 integration of the cotangent Hamiltonian flow.

    With S(t) the gradient of the (possibly blended) dual norm at T, the
    plane flows by the projected S and T by the commutator [S, T]; the
    state is re-projected onto orthonormal frames and the incidence slice
    after every step. The step is halved (up to 20 times) when the energy
    drift per unit time exceeds drift_tol. Returns (trajectory dict, max
    energy drift).
    """
    ok, errs = start.validate(tol=1e-8)
    if not ok:
        raise ValueError("invalid start cotangent: %s" % (errs,))
    dual = SmoothedDual(beta, lam)
    for attempt in range(21):
        try:
            return _grass_flow_run(
                beta, dual, start, duration, abs(step) / 2**attempt, lam, drift_tol
            )
        except GrassFlowError:
            continue
    raise GrassFlowError("energy drift persisted through 20 step halvings")


def _grass_flow_run(beta, dual, start, duration, step, lam, drift_tol):
    sgn = 1.0 if duration >= 0 else -1.0
    total = abs(duration)
    n_steps = int(np.ceil(total / step))
    h = total / n_steps

    Q = start.point.frame.copy()
    sign = start.point.sign
    T = start.T.copy()
    B = np.eye(start.point.n)
    H0 = 0.5 * dual.value(T) ** 2

    def field(Qc, Tc, Bc):
        S = dual.grad(Tc)
        dQ = (np.eye(len(Qc)) - Qc @ Qc.T) @ S @ Qc
        dT = S @ Tc - Tc @ S
        dB = S @ Bc
        return dQ, dT, dB

    times = [0.0]
    Qs = [Q.copy()]
    Ts = [T.copy()]
    Bs = [B.copy()]
    Ss = [dual.grad(T)]
    max_drift = 0.0
    for kstep in range(n_steps):
        dt = sgn * h
        k1 = field(Q, T, B)
        k2 = field(Q + 0.5 * dt * k1[0], T + 0.5 * dt * k1[1], B + 0.5 * dt * k1[2])
        k3 = field(Q + 0.5 * dt * k2[0], T + 0.5 * dt * k2[1], B + 0.5 * dt * k2[2])
        k4 = field(Q + dt * k3[0], T + dt * k3[1], B + dt * k3[2])
        Q = Q + dt / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        T = T + dt / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        B = B + dt / 6.0 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
        Q = _orient_qr(Q)[:, : Q.shape[1]]
        drift = abs(0.5 * dual.value(T) ** 2 - H0)
        max_drift = max(max_drift, drift)
        T = _project_cotangent(Q, T)
        times.append(sgn * (kstep + 1) * h)
        Qs.append(Q.copy())
        Ts.append(T.copy())
        Bs.append(B.copy())
        Ss.append(dual.grad(T))
        if max_drift > drift_tol * max(total, 1.0):
            raise GrassFlowError(
                "energy drift %.3e exceeded tolerance at step %d" % (max_drift, kstep)
            )
    return {
        "times": np.asarray(times),
        "frames": Qs,
        "sign": sign,
        "T": Ts,
        "B": Bs,
        "S": Ss,
        "beta": beta,
        "lam": lam,
    }, max_drift


def geodesic_rank(trajectory, rel_tol=1e-7):
    """The constant numerical rank of T along the trajectory."""
    ranks = []
    for T in trajectory["T"]:
        s = np.linalg.svd(T, compute_uv=False)
        smax = s[0] if len(s) else 0.0
        ranks.append(int(np.sum(s > rel_tol * max(smax, 1e-30))))
    ranks = np.asarray(ranks)
    if np.any(ranks != ranks[0]):
        raise RankDriftError(
            "rank drifted along the trajectory: %s" % np.unique(ranks)
        )
    return int(ranks[0])


def transport_check(trajectory, tol=1e-4):
    """B_t transports the plane, the image and the kernel of T_0 onto
    those of T_t (largest principal angle below tol)."""
    Ts = trajectory["T"]
    Bs = trajectory["B"]
    Qs = trajectory["frames"]
    r = geodesic_rank(trajectory)
    worst = 0.0
    idx = np.linspace(0, len(Ts) - 1, 9).astype(int)
    K0 = null_space(Ts[0])
    I0 = _image_basis(Ts[0], r)
    for j in idx:
        Bj = Bs[j]
        worst = max(worst, subspace_angle(Bj @ Qs[0], Qs[j]))
        It = _image_basis(Ts[j], r)
        worst = max(worst, subspace_angle(Bj @ I0, It))
        Kt = null_space(Ts[j])
        worst = max(worst, subspace_angle(Bj @ K0, Kt))
    return worst <= tol, worst


def characteristic_defect_on_image(trajectory, tol=1e-4):
    """The image curve (Im T_t, T_t) must itself be characteristic: its
    frame velocity matches the projected S. Finite differences in t."""
    Ts = trajectory["T"]
    Ss = trajectory["S"]
    times = trajectory["times"]
    r = geodesic_rank(trajectory)
    worst = 0.0
    for j in range(1, len(Ts) - 1, max(1, len(Ts) // 16)):
        I_prev = _image_basis(Ts[j - 1], r)
        I_next = _image_basis(Ts[j + 1], r)
        I_cur = _image_basis(Ts[j], r)
        # align bases before differencing
        I_prev, _ = _align_frames(I_cur, I_prev)
        I_next, _ = _align_frames(I_cur, I_next)
        dI = (I_next - I_prev) / (times[j + 1] - times[j - 1])
        P = I_cur @ I_cur.T
        expected = (np.eye(len(P)) - P) @ Ss[j] @ I_cur
        worst = max(worst, float(np.max(np.abs((np.eye(len(P)) - P) @ dI - expected))))
    return worst <= tol, worst


# ---------------------------------------------------------------------------
# the linear-algebra complement and the k <-> n-k correspondence


def invariant_complement(T, point: GrassPoint, n_draws=16, seed=3, tol=1e-9):
    """An invariant complement with the determinant splitting property.

    For invertible T with T(plane) = plane, solves U T = T^T U over the
    kernel of the Sylvester operator, picks the best-conditioned U among
    random combinations, and returns the U-preimage of the orthogonal
    annihilator. det T restricted to the plane times det T restricted to
    the complement equals det T.
    """
    T = np.asarray(T, dtype=float)
    n = T.shape[0]
    Q = point.frame
    if subspace_angle(T @ Q, Q) > 1e-7:
        raise ValueError("the plane is not invariant under T")
    M = np.kron(T.T, np.eye(n)) - np.kron(np.eye(n), T.T)
    ker = null_space(M, rcond=1e-10)
    if ker.shape[1] == 0:
        raise RuntimeError("no intertwiner found")
    rng = np.random.default_rng(seed)
    best_U, best_s = None, -1.0
    for _ in range(n_draws):
        w = rng.normal(size=ker.shape[1])
        U = (ker @ w).reshape(n, n)
        s = np.linalg.svd(U, compute_uv=False)
        smin = s[-1] / s[0] if s[0] > 0 else 0.0
        if smin > best_s:
            best_s, best_U = smin, U
    if best_s < 1e-10:
        raise RuntimeError("no invertible intertwiner among the draws")
    U = best_U
    ann = null_space(Q.T)
    omega = np.linalg.solve(U, ann)
    om_pt = from_spanning(omega)
    if subspace_angle(T @ om_pt.frame, om_pt.frame) > 1e-6:
        raise RuntimeError("complement is not invariant")
    dl = np.linalg.det(Q.T @ T @ Q)
    do = np.linalg.det(
        np.linalg.lstsq(om_pt.frame, T @ om_pt.frame, rcond=None)[0]
    )
    dt = np.linalg.det(T)
    if abs(dl * do - dt) > 1e-6 * max(abs(dt), 1e-30):
        raise RuntimeError(
            "determinant splitting failed: %g * %g != %g" % (dl, do, dt)
        )
    return om_pt


def _restrict_to(Wb, B):
    """Matrix of the operator induced by B on the span of the columns of
    Wb, in that basis (requires invariance up to projection)."""
    return np.linalg.lstsq(Wb, B @ Wb, rcond=None)[0]


def corresponding_geodesic(trajectory, closure_tol=1e-3):
    """Build the partner geodesic on the complementary Grassmannian.

    Given a closed (or half-symmetric) lifted geodesic with transport B,
    quotients out Im(T_0) inside Ker(T_0), finds the invariant complement
    of the induced return map there, pulls it back, and flows the result
    with the same initial covector. Returns a report dict with both
    trajectories and the verified properties.
    """
    Ts = trajectory["T"]
    Qs = trajectory["frames"]
    Bs = trajectory["B"]
    times = trajectory["times"]
    beta = trajectory["beta"]
    lam = trajectory["lam"]
    n = Qs[0].shape[0]
    k = Qs[0].shape[1]
    T0, TL = Ts[0], Ts[-1]
    if np.linalg.norm(TL - T0) > closure_tol * max(np.linalg.norm(T0), 1e-30):
        raise ValueError("trajectory is not closed in the covector")
    ang_closed = subspace_angle(Qs[-1], Qs[0])
    if ang_closed > closure_tol:
        raise ValueError("trajectory base is not closed mod orientation")
    BL = Bs[-1]
    r = geodesic_rank(trajectory)

    I0 = _image_basis(T0, r)
    K0 = null_space(T0)  # n - r columns
    # W carries Ker/Im: the part of the kernel orthogonal to the image
    M = K0 - I0 @ (I0.T @ K0)
    W = np.linalg.svd(M, full_matrices=False)[0][:, : n - 2 * r]
    Btilde = _restrict_to(W, BL)
    # the plane descends to W with dimension k - r
    if k - r > 0:
        lam_in_W = W.T @ Qs[0]
        lam_tilde = from_spanning(_orient_qr(lam_in_W)[:, : k - r])
        om_tilde = invariant_complement(Btilde, lam_tilde)
        om_in_V = W @ om_tilde.frame
    else:
        # the plane descends to zero: its complement is all of Ker/Im
        om_in_V = W
    omega0 = from_spanning(np.hstack([I0, om_in_V]))

    start = GrassCotangent(omega0, T0)
    traj2, _ = grass_characteristic_flow(
        beta,
        start,
        times[-1],
        times[1] - times[0] if len(times) > 1 else times[-1],
        lam=lam,
    )
    # closure type: the return map preserves or reverses orientation, and
    # it does so in the same way on the plane and its partner
    sign_lambda = float(np.sign(np.linalg.det(Qs[0].T @ BL @ Qs[0])))
    sign_omega = float(np.sign(np.linalg.det(omega0.frame.T @ BL @ omega0.frame)))
    report = {
        "omega0": omega0,
        "trajectory": traj2,
        "rank": r,
        "rank_partner": geodesic_rank(traj2),
        "closure_angle": subspace_angle(traj2["frames"][-1], traj2["frames"][0]),
        "closure_sign": sign_lambda,
        "closure_sign_partner": sign_omega,
        "transport_angle": max(
            subspace_angle(Bs[j] @ omega0.frame, traj2["frames"][j])
            for j in np.linspace(0, len(Bs) - 1, 7).astype(int)
        ),
    }
    # lengths measured independently by integrating the tangent speeds
    report["length"] = _trajectory_length(trajectory)
    report["length_partner"] = _trajectory_length(traj2)
    return report


def _trajectory_length(trajectory):
    beta = trajectory["beta"]
    frames = trajectory["frames"]
    return curve_length_grass(beta, frames)
