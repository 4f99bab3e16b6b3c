"""Confidence regions and their support functions.

Every region is a set of perturbations ``x`` of a transition row.  By default
the zero-sum constraint ``sum(x) == 0`` is part of the set so perturbed rows
keep summing to one.  Four shapes are supported:

* ``L2Ball(r)``          ``|x|_2 <= r``
* ``L1Ball(r)``          ``|x|_1 <= r``
* ``Ellipsoid(A)``       ``x^T A x <= 1`` with ``A`` symmetric positive definite
* ``Parallelepiped(B)``  ``|B x|_1 <= 1`` with ``B`` invertible

The ellipsoid with ``A = I / r**2`` is the ball of radius ``r``; note that
``A = I / r`` (another common way of writing it) gives radius ``sqrt(r)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np
from scipy.optimize import linprog, minimize

MEMBER_TOL = 1e-12


class RegionError(ValueError):
    pass


@dataclass(frozen=True)
class SupportResult:
    value: float
    maximizer: np.ndarray


class ConfidenceRegion:
    kind: str
    zero_sum: bool = True
    dim: int | None = None

    def support(self, v: np.ndarray) -> SupportResult:
        raise NotImplementedError

    def value(self, v: np.ndarray) -> float:
        """Support value only; the learners' hot path."""
        return self.support(v).value

    def contains(self, x: np.ndarray, tol: float = MEMBER_TOL) -> bool:
        x = np.asarray(x, dtype=float)
        if self.zero_sum and abs(x.sum()) > tol:
            return False
        return self._gauge(x) <= 1.0 + tol

    def _gauge(self, x: np.ndarray) -> float:
        raise NotImplementedError

    def _check_dim(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if v.ndim != 1:
            raise RegionError("support needs a vector")
        if self.dim is not None and v.shape[0] != self.dim:
            raise RegionError(f"vector has dimension {v.shape[0]}, region has {self.dim}")
        return v

    def polytope_matrix(self, n: int) -> np.ndarray | None:
        """``B`` with the region equal to ``{|B x|_1 <= 1}``; None for smooth sets."""
        return None

    def max_norm2(self, n: int) -> float:
        """Largest Euclidean norm over the region."""
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class L2Ball(ConfidenceRegion):
    radius: float
    zero_sum: bool = True
    kind = "l2"

    def __post_init__(self):
        if not self.radius > 0:
            raise RegionError("radius must be positive")

    def support(self, v):
        v = self._check_dim(v)
        c = v - v.mean() if self.zero_sum else v
        nrm = math.sqrt(float(c @ c))
        if nrm == 0.0:
            return SupportResult(0.0, np.zeros_like(v))
        return SupportResult(self.radius * nrm, self.radius * c / nrm)

    def value(self, v):
        c = v - v.mean() if self.zero_sum else v
        return self.radius * math.sqrt(float(c @ c))

    def _gauge(self, x):
        return float(np.linalg.norm(x)) / self.radius

    def max_norm2(self, n):
        return self.radius

    def to_dict(self):
        return {"kind": "l2", "radius": self.radius, "zero_sum": self.zero_sum}


@dataclass(frozen=True)
class L1Ball(ConfidenceRegion):
    radius: float
    zero_sum: bool = True
    kind = "l1"

    def __post_init__(self):
        if not self.radius > 0:
            raise RegionError("radius must be positive")

    def support(self, v):
        v = self._check_dim(v)
        y = np.zeros_like(v)
        if self.zero_sum:
            hi, lo = int(np.argmax(v)), int(np.argmin(v))
            if v[hi] == v[lo]:
                return SupportResult(0.0, y)
            y[hi], y[lo] = self.radius / 2, -self.radius / 2
            return SupportResult(self.radius / 2 * float(v[hi] - v[lo]), y)
        k = int(np.argmax(np.abs(v)))
        if v[k] == 0.0:
            return SupportResult(0.0, y)
        y[k] = self.radius * np.sign(v[k])
        return SupportResult(self.radius * abs(float(v[k])), y)

    def value(self, v):
        if self.zero_sum:
            return self.radius / 2 * float(v.max() - v.min())
        return self.radius * float(np.abs(v).max())

    def _gauge(self, x):
        return float(np.abs(x).sum()) / self.radius

    def polytope_matrix(self, n):
        return np.eye(n) / self.radius

    def max_norm2(self, n):
        return self.radius / math.sqrt(2) if self.zero_sum else self.radius

    def vertices(self, n: int) -> np.ndarray:
        if not self.zero_sum:
            eye = np.eye(n) * self.radius
            return np.vstack([eye, -eye])
        out = []
        for i in range(n):
            for j in range(n):
                if i != j:
                    x = np.zeros(n)
                    x[i], x[j] = self.radius / 2, -self.radius / 2
                    out.append(x)
        return np.array(out).reshape(-1, n)

    def to_dict(self):
        return {"kind": "l1", "radius": self.radius, "zero_sum": self.zero_sum}


class Ellipsoid(ConfidenceRegion):
    kind = "ellipsoid"

    def __init__(self, matrix, zero_sum: bool = True):
        A = np.array(matrix, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise RegionError("ellipsoid matrix must be square")
        if not np.allclose(A, A.T, rtol=0, atol=1e-12):
            raise RegionError("ellipsoid matrix must be symmetric")
        try:
            L = np.linalg.cholesky(A)
        except np.linalg.LinAlgError:
            raise RegionError("ellipsoid matrix is not positive definite") from None
        if np.min(np.diag(L)) <= 0:
            raise RegionError("ellipsoid matrix is not positive definite")
        A.setflags(write=False)
        self.matrix = A
        self.zero_sum = zero_sum
        self.dim = A.shape[0]
        inv = np.linalg.inv(A)
        self._inv = (inv + inv.T) / 2
        self._eig = np.linalg.eigh(A)
        ones = np.ones(self.dim)
        self._inv_ones = self._inv @ ones
        self._ones_inv_ones = float(ones @ self._inv_ones)

    def __repr__(self):
        return f"Ellipsoid(dim={self.dim}, zero_sum={self.zero_sum})"

    def support(self, v):
        v = self._check_dim(v)
        w = v - (self._inv_ones @ v) / self._ones_inv_ones if self.zero_sum else v
        Mw = self._inv @ w
        sig = math.sqrt(max(float(w @ Mw), 0.0))
        # a centred vector that is zero up to roundoff has no meaningful direction
        if sig <= 1e-13 * float(np.abs(v).max(initial=0.0)) / math.sqrt(self._eig[0][0]) or sig == 0.0:
            return SupportResult(0.0, np.zeros_like(v))
        return SupportResult(sig, Mw / sig)

    def _gauge(self, x):
        return math.sqrt(max(float(x @ self.matrix @ x), 0.0))

    def max_norm2(self, n):
        # zero-sum restriction can only shrink this bound
        return 1.0 / math.sqrt(self._eig[0][0])

    def project(self, y: np.ndarray) -> np.ndarray:
        """Euclidean projection onto ``{x^T A x <= 1}`` (zero-sum not imposed)."""
        if float(y @ self.matrix @ y) <= 1.0:
            return y.copy()
        lam, Q = self._eig
        z = Q.T @ y
        nu = 0.0
        for _ in range(200):
            d = 1.0 + nu * lam
            f = float(np.sum(lam * z ** 2 / d ** 2)) - 1.0
            df = float(np.sum(-2.0 * lam ** 2 * z ** 2 / d ** 3))
            step = f / df
            nu -= step
            if abs(step) <= 1e-15 * max(1.0, nu):
                break
        return Q @ (z / (1.0 + nu * lam))

    def to_dict(self):
        return {"kind": "ellipsoid", "matrix": self.matrix.ravel().tolist(), "zero_sum": self.zero_sum}


class Parallelepiped(ConfidenceRegion):
    kind = "parallelepiped"

    def __init__(self, matrix, zero_sum: bool = True):
        B = np.array(matrix, dtype=float)
        if B.ndim != 2 or B.shape[0] != B.shape[1]:
            raise RegionError("parallelepiped matrix must be square")
        try:
            lu_inv = np.linalg.inv(B)
        except np.linalg.LinAlgError:
            raise RegionError("parallelepiped matrix is singular") from None
        if not np.all(np.isfinite(lu_inv)) or np.linalg.cond(B) > 1e12:
            raise RegionError("parallelepiped matrix is singular")
        B.setflags(write=False)
        self.matrix = B
        self.zero_sum = zero_sum
        self.dim = B.shape[0]
        self._inv = lu_inv
        self._h = lu_inv.T @ np.ones(self.dim)

    def __repr__(self):
        return f"Parallelepiped(dim={self.dim}, zero_sum={self.zero_sum})"

    def _candidates(self, g):
        """Values and vertices ``u`` of ``{|u|_1 <= 1, h.u = 0}`` for objective ``g``.

        The vertices sit on edges of the cross-polytope that cross the
        hyperplane, or on cross-polytope vertices lying in it.
        """
        h = self._h
        scale = max(np.abs(h).max(), 1.0)
        on_plane = np.abs(h) <= 1e-14 * scale
        ah = np.abs(h)
        sg = np.sign(h)
        a = sg * g
        num = ah[None, :] * a[:, None] - ah[:, None] * a[None, :]
        den = ah[:, None] + ah[None, :]
        with np.errstate(invalid="ignore", divide="ignore"):
            vals = np.where(den > 0, num / den, -np.inf)
        pair_ok = ~on_plane[:, None] & ~on_plane[None, :]
        np.fill_diagonal(pair_ok, False)
        vals = np.where(pair_ok, vals, -np.inf)
        return vals, on_plane

    def support(self, v):
        v = self._check_dim(v)
        g = self._inv.T @ v
        n = self.dim
        if not self.zero_sum:
            k = int(np.argmax(np.abs(g)))
            u = np.zeros(n)
            if g[k] == 0.0:
                return SupportResult(0.0, u)
            u[k] = np.sign(g[k])
            return SupportResult(abs(float(g[k])), self._inv @ u)
        vals, on_plane = self._candidates(g)
        best, u = 0.0, np.zeros(n)
        if np.isfinite(vals).any():
            i, j = np.unravel_index(int(np.argmax(vals)), vals.shape)
            if vals[i, j] > best:
                ah = np.abs(self._h)
                t = ah[j] / (ah[i] + ah[j])
                u = np.zeros(n)
                u[i] = t * np.sign(self._h[i])
                u[j] = -(1 - t) * np.sign(self._h[j])
                best = float(vals[i, j])
        for k in np.flatnonzero(on_plane):
            if abs(g[k]) > best:
                best = abs(float(g[k]))
                u = np.zeros(n)
                u[k] = np.sign(g[k])
        if best == 0.0:
            return SupportResult(0.0, np.zeros(n))
        return SupportResult(best, self._inv @ u)

    def _gauge(self, x):
        return float(np.abs(self.matrix @ x).sum())

    def polytope_matrix(self, n):
        return self.matrix

    def max_norm2(self, n):
        return float(np.linalg.norm(self._inv, axis=0).max())

    def vertices(self, n: int) -> np.ndarray:
        h, out = self._h, []
        if not self.zero_sum:
            eye = np.eye(n)
            return np.vstack([eye, -eye]) @ self._inv.T
        ah = np.abs(h)
        on_plane = ah <= 1e-14 * max(ah.max(), 1.0)
        for i in range(n):
            if on_plane[i]:
                for s in (1.0, -1.0):
                    u = np.zeros(n)
                    u[i] = s
                    out.append(u)
                continue
            for j in range(n):
                if j == i or on_plane[j]:
                    continue
                t = ah[j] / (ah[i] + ah[j])
                u = np.zeros(n)
                u[i] = t * np.sign(h[i])
                u[j] = -(1 - t) * np.sign(h[j])
                out.append(u)
        return np.array(out).reshape(-1, n) @ self._inv.T

    def to_dict(self):
        return {"kind": "parallelepiped", "matrix": self.matrix.ravel().tolist(), "zero_sum": self.zero_sum}


def region_from_dict(doc: dict) -> ConfidenceRegion:
    kind = doc.get("kind")
    zero_sum = bool(doc.get("zero_sum", True))
    if kind in ("l2", "l1"):
        if "radius" not in doc:
            raise RegionError(f"{kind} region needs a radius")
        cls = L2Ball if kind == "l2" else L1Ball
        return cls(float(doc["radius"]), zero_sum)
    if kind in ("ellipsoid", "parallelepiped"):
        if "matrix" not in doc:
            raise RegionError(f"{kind} region needs a matrix")
        mat = np.asarray(doc["matrix"], dtype=float)
        if mat.ndim == 1:
            n = int(round(math.sqrt(mat.size)))
            if n * n != mat.size:
                raise RegionError("flat matrix length is not a square")
            mat = mat.reshape(n, n)
        cls = Ellipsoid if kind == "ellipsoid" else Parallelepiped
        return cls(mat, zero_sum)
    raise RegionError(f"unknown region kind {kind!r}")


def support(region: ConfidenceRegion, v) -> SupportResult:
    return region.support(np.asarray(v, dtype=float))


# ---------------------------------------------------------------------------
# simplex-constrained support: sup { (p + x).v : x in region, 0 <= p + x <= 1 }


def project_box_hyperplane(y: np.ndarray, lo: np.ndarray, hi: np.ndarray,
                           total: float = 0.0) -> np.ndarray:
    """Euclidean projection onto ``{lo <= x <= hi, sum(x) = total}``.

    ``sum(clip(y - t, lo, hi))`` is piecewise linear and nonincreasing in
    ``t``; the root is located among the sorted breakpoints and interpolated.
    """
    bps = np.unique(np.concatenate([y - lo, y - hi]))
    sums = np.array([np.clip(y - t, lo, hi).sum() for t in bps])
    # sums is nonincreasing along bps
    if sums[0] < total or sums[-1] > total:
        raise RegionError("box and hyperplane do not intersect")
    k = int(np.searchsorted(-sums, -total, side="left"))
    if sums[k] == total or k == 0:
        t = bps[k]
    else:
        t0, t1, s0, s1 = bps[k - 1], bps[k], sums[k - 1], sums[k]
        t = t0 + (s0 - total) * (t1 - t0) / (s0 - s1)
    return np.clip(y - t, lo, hi)


def box_inclusion(region: ConfidenceRegion, p: np.ndarray, tol: float = 1e-12) -> bool:
    """True when every ``x`` in the region keeps ``p + x`` inside ``[0, 1]``."""
    n = len(p)
    eye = np.eye(n)
    for j in range(n):
        if region.value(eye[j]) > 1.0 - p[j] + tol:
            return False
        if region.value(-eye[j]) > p[j] + tol:
            return False
    return True


def _lp_constrained(B: np.ndarray, p: np.ndarray, v: np.ndarray, zero_sum: bool) -> tuple[float, np.ndarray]:
    n = len(p)
    # variables: x (n), u+ (n), u- (n) with B x = u+ - u-, sum(u+ + u-) <= 1
    c = np.concatenate([-v, np.zeros(2 * n)])
    A_eq = np.hstack([B, -np.eye(n), np.eye(n)])
    b_eq = np.zeros(n)
    if zero_sum:
        A_eq = np.vstack([A_eq, np.concatenate([np.ones(n), np.zeros(2 * n)])])
        b_eq = np.append(b_eq, 0.0)
    A_ub = np.concatenate([np.zeros(n), np.ones(2 * n)])[None, :]
    bounds = [(-p[j], 1.0 - p[j]) for j in range(n)] + [(0, None)] * (2 * n)
    res = linprog(c, A_ub=A_ub, b_ub=[1.0], A_eq=A_eq, b_eq=b_eq, bounds=bounds, method="highs")
    if res.status != 0:
        raise RegionError(f"LP failed: {res.message}")
    x = res.x[:n]
    return float(v @ x), x


def _l2_box_constrained(r: float, p: np.ndarray, v: np.ndarray, zero_sum: bool) -> tuple[float, np.ndarray]:
    """Exact KKT solve of ``max v.x`` over ``|x|_2 <= r``, box and zero-sum.

    The maximizer is ``clip((v - lam) / kappa, lo, hi)``; ``lam`` enforces
    the zero sum and ``kappa`` the ball.  Both are found by bisection.
    """
    lo, hi = -p, 1.0 - p

    def x_of(kappa):
        if not zero_sum:
            return np.clip(v / kappa, lo, hi)
        return project_box_hyperplane(v / kappa, lo, hi)

    # kappa -> 0 gives the box-only LP optimum
    k_small = 1e-14 * max(np.abs(v).max(), 1e-300)
    x0 = x_of(k_small)
    if np.linalg.norm(x0) <= r:
        return float(v @ x0), x0
    k_lo, k_hi = k_small, max(np.abs(v).max(), 1e-300) * 4.0 / r + 1.0
    while np.linalg.norm(x_of(k_hi)) > r:
        k_hi *= 4.0
    for _ in range(200):
        mid = math.sqrt(k_lo * k_hi)
        if np.linalg.norm(x_of(mid)) > r:
            k_lo = mid
        else:
            k_hi = mid
        if k_hi / k_lo - 1.0 < 1e-15:
            break
    x = x_of(k_hi)
    return float(v @ x), x


def dykstra(y: np.ndarray, projections, tol: float = 1e-12, max_iter: int = 10_000) -> np.ndarray:
    """Dykstra's alternating projection onto an intersection of convex sets."""
    x = y.copy()
    incs = [np.zeros_like(y) for _ in projections]
    for _ in range(max_iter):
        prev = x
        for k, proj in enumerate(projections):
            z = proj(x + incs[k])
            incs[k] = x + incs[k] - z
            x = z
        if np.linalg.norm(x - prev) <= tol:
            break
    return x


def _pga_constrained(region: ConfidenceRegion, p: np.ndarray, v: np.ndarray,
                     tol: float = 1e-8, max_iter: int = 100_000) -> tuple[float, np.ndarray]:
    """Projected-gradient ascent of ``v.x`` over region, box and zero-sum."""
    lo, hi = -p, 1.0 - p
    if isinstance(region, L2Ball):
        r = region.radius

        def proj_region(z):
            nz = np.linalg.norm(z)
            return z if nz <= r else z * (r / nz)
    elif isinstance(region, Ellipsoid):
        proj_region = region.project
    else:
        raise RegionError(f"projected ascent needs a smooth region, got {region.kind}")
    if region.zero_sum:
        def proj_box(z):
            return project_box_hyperplane(z, lo, hi)
    else:
        def proj_box(z):
            return np.clip(z, lo, hi)

    vn = np.linalg.norm(v)
    x = np.zeros_like(v)
    if vn == 0.0:
        return 0.0, x
    eta = 2.0 * region.max_norm2(len(p)) / vn
    for _ in range(max_iter):
        x_new = dykstra(x + eta * v, [proj_region, proj_box], tol=tol * 1e-3)
        step = np.linalg.norm(x_new - x)
        x = x_new
        if step <= tol:
            break
    return float(v @ x), x


def support_simplex_constrained(region: ConfidenceRegion, p_nominal, v, *,
                                tol: float = 1e-8, assume_inside: bool | None = None) -> float:
    """``sup { q.v : q = p + x, x in region, 0 <= q <= 1 }``.

    When the region provably keeps ``p + x`` inside the box the simplex
    constraints are redundant and the proxy value is exact.
    """
    p = np.asarray(p_nominal, dtype=float)
    v = np.asarray(v, dtype=float)
    inside = box_inclusion(region, p) if assume_inside is None else assume_inside
    if inside:
        return float(p @ v) + region.value(v)
    B = region.polytope_matrix(len(p))
    if B is not None:
        val, _ = _lp_constrained(B, p, v, region.zero_sum)
    elif isinstance(region, L2Ball):
        val, _ = _l2_box_constrained(region.radius, p, v, region.zero_sum)
    else:
        val, _ = _pga_constrained(region, p, v, tol=tol)
    return float(p @ v) + val


def support_gradient_mu(region: ConfidenceRegion, features: np.ndarray, theta) -> np.ndarray:
    """Gradient of ``theta -> sigma(features @ theta)``: ``features.T @ maximizer``."""
    features = np.asarray(features, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if features.ndim != 2 or features.shape[1] != theta.shape[0]:
        raise RegionError("feature matrix and parameter dimensions disagree")
    return features.T @ region.support(features @ theta).maximizer


# ---------------------------------------------------------------------------
# amplification diagnostics


def _nearest_l1_lp(B, y, p, zero_sum):
    n = len(p)
    # variables: x, t (|y - x| <= t), u+, u-
    c = np.concatenate([np.zeros(n), np.ones(n), np.zeros(2 * n)])
    I, Z = np.eye(n), np.zeros((n, n))
    A_ub = np.vstack([
        np.hstack([-I, -I, Z, Z]),
        np.hstack([I, -I, Z, Z]),
        np.concatenate([np.zeros(2 * n), np.ones(2 * n)])[None, :],
    ])
    b_ub = np.concatenate([-y, y, [1.0]])
    A_eq = np.hstack([B, Z, -I, I])
    b_eq = np.zeros(n)
    if zero_sum:
        A_eq = np.vstack([A_eq, np.concatenate([np.ones(n), np.zeros(3 * n)])])
        b_eq = np.append(b_eq, 0.0)
    bounds = [(-p[j], 1 - p[j]) for j in range(n)] + [(0, None)] * (3 * n)
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq, bounds=bounds, method="highs")
    if res.status != 0:
        raise RegionError(f"LP failed: {res.message}")
    return float(res.fun)


def _nearest_numeric(region, y, p, norm, xi):
    """min over the true set of the chosen distance, solved with SLSQP."""
    n = len(p)
    start = project_box_hyperplane(np.zeros(n), -p, 1 - p) if region.zero_sum else np.zeros(n)
    cons = [{"type": "ineq", "fun": lambda x: 1.0 - region._gauge(x) ** 2}]
    if region.zero_sum:
        cons.append({"type": "eq", "fun": lambda x: np.sum(x), "jac": lambda x: np.ones(n)})
    bounds = [(-p[j], 1 - p[j]) for j in range(n)]
    if norm == "l1":
        # smooth epigraph form: variables (x, t)
        def f(z):
            return float(z[n:].sum())
        cons_t = [
            {"type": "ineq", "fun": lambda z: z[n:] - (y - z[:n])},
            {"type": "ineq", "fun": lambda z: z[n:] + (y - z[:n])},
        ] + [{"type": c["type"], "fun": (lambda fn: lambda z: fn(z[:n]))(c["fun"])} for c in cons]
        z0 = np.concatenate([start, np.abs(y - start)])
        res = minimize(f, z0, method="SLSQP", constraints=cons_t,
                       bounds=bounds + [(0, None)] * n, options={"ftol": 1e-12, "maxiter": 500})
        return float(np.abs(y - res.x[:n]).sum())
    w = np.asarray(xi, dtype=float)
    res = minimize(lambda x: float(w @ (y - x) ** 2), start, jac=lambda x: -2 * w * (y - x),
                   method="SLSQP", constraints=cons, bounds=bounds, options={"ftol": 1e-14, "maxiter": 500})
    return math.sqrt(float(w @ (y - res.x) ** 2))


def beta_estimate(proxy: ConfidenceRegion, p_nominal, samples: int = 64,
                  rng: np.random.Generator | None = None, *, norm: str = "l1",
                  xi=None) -> float:
    """Lower bound on ``max_{y in proxy} min_{x in true set} |y - x|``.

    The true set adds the box constraints ``-p <= x <= 1 - p``.  Returns an
    exact 0 when the box is provably redundant.  For polytope regions the
    outer max is attained at a vertex, so all vertices are enumerated and
    the result is exact; smooth regions use ``samples`` boundary points
    (coordinate directions first, then random directions from ``rng``).

    ``norm="xi"`` measures distance in the xi-weighted Euclidean norm and
    divides by ``min(xi)``.
    """
    p = np.asarray(p_nominal, dtype=float)
    n = len(p)
    if norm not in ("l1", "xi"):
        raise RegionError("norm must be 'l1' or 'xi'")
    if norm == "xi" and xi is None:
        raise RegionError("xi-weighted norm needs a state distribution")
    if box_inclusion(proxy, p):
        return 0.0
    B = proxy.polytope_matrix(n)
    if B is not None:
        points = proxy.vertices(n)
    else:
        if rng is None:
            raise RegionError("smooth regions need a generator for boundary sampling")
        eye = np.eye(n)
        dirs = [d for j in range(n) for d in (eye[j], -eye[j])]
        extra = max(samples - len(dirs), 0)
        dirs = dirs[:samples] + list(rng.standard_normal((extra, n)))
        points = np.array([proxy.support(d).maximizer for d in dirs])
    best = 0.0
    for y in points:
        if np.all(y >= -p - 1e-15) and np.all(y <= 1 - p + 1e-15):
            continue
        if norm == "l1" and B is not None:
            d = _nearest_l1_lp(B, y, p, proxy.zero_sum)
        else:
            d = _nearest_numeric(proxy, y, p, norm, xi)
        best = max(best, d)
    if norm == "xi":
        best /= float(np.min(xi))
    return best


def beta_table(mdp, regions, samples: int = 32, rng=None, *, norm="l1", xi=None,
               pairs: Iterable[tuple[int, int]] | None = None) -> float:
    """Max of :func:`beta_estimate` over state-action pairs."""
    from .robust_dp import region_at  # local import: robust_dp imports this module

    if regions is None:
        return 0.0
    if pairs is None:
        pairs = [(i, a) for i in range(mdp.n_states) for a in range(mdp.n_actions)
                 if i not in mdp.terminal]
    best = 0.0
    for i, a in pairs:
        reg = region_at(regions, i, a)
        if reg is not None:
            best = max(best, beta_estimate(reg, mdp.transitions[a, i], samples, rng, norm=norm, xi=xi))
    return best


def epsilon_bound_q(discount: float, beta: float) -> float:
    if discount * (1.0 + beta) >= 1.0:
        raise RegionError("discount too large for this beta: need discount * (1 + beta) < 1")
    return discount * beta / (1.0 - discount * (1.0 + beta))


def td_rho(discount: float, lam: float) -> float:
    return discount * lam / (1.0 - discount * lam)


def epsilon_bound_td(discount: float, beta: float, rho: float) -> float:
    if discount * (1.0 + rho * beta) >= 1.0:
        raise RegionError("discount too large for this beta: need discount * (1 + rho * beta) < 1")
    return discount * beta / (1.0 - discount * (1.0 + rho * beta))
