"""Sensor and turntable calibration.

Three stages:

1. beam direction ``v`` from tip centre points seen at several depths,
2. turntable axis ``n`` and centre ``X_R`` from filament edges observed
   before and after a turntable rotation,
3. joint maximum-likelihood refinement of all three by Levenberg-Marquardt.

Lengths are millimetres, angles radians.  ``X_R`` is the point where the
turntable axis crosses the plane ``z = 0`` of the stage frame; its position
along the axis is not observable from rotations alone.
"""
import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .errors import (DegeneratePoints, FormatError, InsufficientMotion, InvalidParameter,
                     NoSignal, RankDeficient, SingularNormalEquations)
from .geometry import (fit_direction, make_edge, point_edge_distance, rotation_matrix,
                       sign_canonical, skew, tangent_basis, unit)

TIP = "TIP"
EDGE = "EDGE"

DEFAULT_THRESHOLD_FRAC = 0.5
COV_FLOOR_MM2 = 1e-4
DEFAULT_SIGMA_THETA = np.deg2rad(0.1) ** 2  # variance, rad^2


# -- data model ------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class RawPoint:
    S: np.ndarray
    d: float
    amplitude: float

    def __post_init__(self):
        object.__setattr__(self, "S", np.asarray(self.S, dtype=float).reshape(3))
        if not self.d > 0:
            raise InvalidParameter("raw depth must be positive")
        if self.amplitude < 0:
            raise InvalidParameter("amplitude must be nonnegative")


@dataclass(frozen=True, eq=False)
class CenterPoint:
    S: np.ndarray
    d: float
    Sigma_S: np.ndarray
    sigma_d: float
    n_raw: int = 1

    def __post_init__(self):
        object.__setattr__(self, "S", np.asarray(self.S, dtype=float).reshape(3))
        cov = np.asarray(self.Sigma_S, dtype=float).reshape(3, 3)
        if not np.allclose(cov, cov.T, atol=1e-15):
            raise InvalidParameter("Sigma_S must be symmetric")
        if np.linalg.eigvalsh(cov).min() < -1e-15:
            raise InvalidParameter("Sigma_S must be positive semidefinite")
        if not self.sigma_d > 0:
            raise InvalidParameter("sigma_d must be positive")
        if self.n_raw < 1:
            raise InvalidParameter("n_raw must be >= 1")
        object.__setattr__(self, "Sigma_S", cov)

    @property
    def X_depth(self):
        return self.d


@dataclass(frozen=True)
class FrameScan:
    frame_id: int
    kind: str
    centers: tuple
    turntable_angle: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "centers", tuple(self.centers))
        if self.kind == TIP and len(self.centers) != 1:
            raise InvalidParameter("a TIP frame holds exactly one centre point")
        if self.kind == EDGE and len(self.centers) < 2:
            raise InvalidParameter("an EDGE frame needs at least two centre points")
        if self.kind not in (TIP, EDGE):
            raise InvalidParameter(f"unknown frame kind {self.kind!r}")


@dataclass(frozen=True)
class RotationReading:
    frame_i: int
    frame_k: int
    theta: float
    sigma_theta: float = DEFAULT_SIGMA_THETA  # variance, rad^2

    def __post_init__(self):
        if not self.sigma_theta > 0:
            raise InvalidParameter("sigma_theta must be positive")


@dataclass(frozen=True, eq=False)
class CalibrationState:
    """Calibration parameters with uncertainty.

    ``covariance`` is 7x7 over ``[v (2 tangent), n (2 tangent), X_R (x, y, z)]``;
    the tangent bases are ``basis_v`` / ``basis_n`` (3x2), and the z row and
    column are zero because ``X_R`` is pinned to ``z = 0``.
    """

    v: np.ndarray
    n: np.ndarray
    X_R: np.ndarray
    covariance: np.ndarray = None
    residual_rms: float = float("nan")
    cost: float = float("nan")
    iterations: int = 0
    converged: bool = True
    singular: bool = False
    cost_history: tuple = ()
    basis_v: np.ndarray = None
    basis_n: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "v", unit(self.v))
        object.__setattr__(self, "n", unit(self.n))
        object.__setattr__(self, "X_R", np.asarray(self.X_R, dtype=float).reshape(3))
        if self.covariance is None:
            object.__setattr__(self, "covariance", np.zeros((7, 7)))
        if self.basis_v is None:
            object.__setattr__(self, "basis_v", tangent_basis(self.v))
        if self.basis_n is None:
            object.__setattr__(self, "basis_n", tangent_basis(self.n))


# -- centre points ---------------------------------------------------------

def _floor_cov(cov, floor):
    w, q = np.linalg.eigh(cov)
    return (q * np.maximum(w, floor)) @ q.T


def extract_center(raws, threshold_frac=DEFAULT_THRESHOLD_FRAC, floor=COV_FLOOR_MM2):
    """Average the raw points whose amplitude reaches ``threshold_frac`` of the peak.

    The covariances follow the central-limit scaling: the spread of the
    selected raw readings (floored at ``floor`` mm^2) divided by their count.
    """
    raws = list(raws)
    if not raws:
        raise NoSignal("no raw points")
    amp = np.array([r.amplitude for r in raws])
    peak = amp.max()
    if not peak > 0:
        raise NoSignal("all amplitudes are zero")
    keep = amp >= threshold_frac * peak
    S = np.array([r.S for r in raws])[keep]
    d = np.array([r.d for r in raws])[keep]
    n = S.shape[0]
    if n > 1:
        cov_p = np.cov(S, rowvar=False, ddof=1)
        var_d = float(np.var(d, ddof=1))
    else:
        cov_p = np.zeros((3, 3))
        var_d = 0.0
    cov_p = _floor_cov(cov_p, floor)
    var_d = max(var_d, floor)
    return CenterPoint(S.mean(axis=0), float(d.mean()), cov_p / n, var_d / n, n)


# -- closed-form initialization -------------------------------------------

def calibrate_beam(tip_frames):
    """Beam direction from tip centres: their stage readings lie on a line along ``v``.

    The sign makes ``v`` point from the sensor toward the target: moving the
    stage along ``v`` shortens the measured depth.
    """
    tips = [f for f in tip_frames if f.kind == TIP]
    if len(tips) < 2:
        raise DegeneratePoints("need at least two TIP frames")
    S = np.array([f.centers[0].S for f in tips])
    d = np.array([f.centers[0].d for f in tips])
    if np.ptp(d) <= 0:
        raise DegeneratePoints("TIP frames must be at distinct depths")
    v = fit_direction(S)
    proj = (S - S.mean(axis=0)) @ v
    if np.dot(proj, d - d.mean()) > 0:
        v = -v
    return v


def frame_points(frame, v):
    """Beam hit points of a frame's centres."""
    return np.array([c.S + c.d * v for c in frame.centers])


def oriented_edge(points):
    """Edge through ``points`` with direction running from first to last point."""
    e = make_edge(points)
    if np.dot(e.q, points[-1] - points[0]) < 0:
        e = e.flipped()
    return e


def _unit_constrained_lsq(G, g):
    """Minimize ``n'Gn - 2g'n`` over unit ``n``; returns all minimizing candidates."""
    lam, Q = np.linalg.eigh(G)
    gp = Q.T @ g
    scale = max(lam[-1], np.abs(g).max(), 1e-300)
    tol = 1e-10 * scale
    if abs(gp[0]) > tol:
        def phi(mu):
            return np.sum(gp ** 2 / (lam - mu) ** 2) - 1.0
        lo = lam[0] - np.linalg.norm(gp)
        hi = lam[0] - abs(gp[0]) * 1e-12
        while phi(hi) < 0:  # root is squeezed against lam[0]
            hi = lam[0] - (lam[0] - hi) * 1e-3
            if lam[0] - hi < 1e-300:
                break
        mu = brentq(phi, lo, hi, xtol=1e-15 * max(1.0, abs(lo)), maxiter=500)
        return [Q @ (gp / (lam - mu))]
    # hard case: the minimizer touches the smallest eigenvalue
    base = np.zeros(3)
    for i in (1, 2):
        if lam[i] - lam[0] > tol:
            base += gp[i] / (lam[i] - lam[0]) * Q[:, i]
    tau2 = 1.0 - base @ base
    if tau2 <= 1e-14:
        return [unit(base)]
    tau = np.sqrt(tau2)
    return [base + tau * Q[:, 0], base - tau * Q[:, 0]]


def _pairs(edge_frames, rotations, v):
    frames = {f.frame_id: f for f in edge_frames if f.kind == EDGE}
    pts = {fid: frame_points(f, v) for fid, f in frames.items()}
    edges = {fid: oriented_edge(p) for fid, p in pts.items()}
    pairs = []
    for r in rotations:
        if r.frame_i not in frames or r.frame_k not in frames:
            raise InvalidParameter(f"rotation {r.frame_i}->{r.frame_k} refers to unknown edge frames")
        pairs.append((r, pts[r.frame_i], pts[r.frame_k], edges[r.frame_i], edges[r.frame_k]))
    return pairs


def _axis_system(pairs):
    """Stacked half-angle constraints ``sin(t/2) n x (a + b) = cos(t/2) (b - a)``."""
    rows, rhs = [], []
    for r, _, _, ei, ek in pairs:
        a, b = ei.q, ek.q
        h = 0.5 * r.theta
        rows.append(-np.sin(h) * skew(a + b))
        rhs.append(np.cos(h) * (b - a))
    return np.vstack(rows), np.concatenate(rhs)


def _center_system(pairs, n):
    """Stacked incidence rows for ``X_R = (x, y, 0)``, mapping each frame onto its partner."""
    rows, rhs = [], []
    for r, pi, pk, ei, ek in pairs:
        for theta, src, dst in ((r.theta, pi, ek), (-r.theta, pk, ei)):
            R = rotation_matrix(n, theta)
            A = -skew(dst.q) @ (np.eye(3) - R)
            for x in src:
                rows.append(A[:, :2])
                rhs.append(dst.m - np.cross(R @ x, dst.q))
    return np.vstack(rows), np.concatenate(rhs)


def _solve_center(pairs, n):
    A, b = _center_system(pairs, n)
    sol, _, rank, sv = np.linalg.lstsq(A, b, rcond=None)
    if rank < 2 or sv[-1] <= 1e-10 * sv[0]:
        raise RankDeficient("turntable centre is not determined by these edges")
    X_R = np.array([sol[0], sol[1], 0.0])
    return X_R, float(np.sqrt(np.mean((A @ sol - b) ** 2)))


def calibrate_turntable(edge_frames, rotations, v):
    """Closed-form turntable axis and centre.

    Edge directions before and after each rotation fix the axis through the
    half-angle form of the rotation constraint, solved on the unit sphere; the
    centre then follows from the stacked point-on-rotated-edge constraints,
    which are linear in it.
    """
    rotations = list(rotations)
    v = unit(v)
    if not rotations:
        raise InsufficientMotion("no rotation readings")
    if all(abs(np.sin(0.5 * r.theta)) < 1e-6 for r in rotations):
        raise InsufficientMotion("all rotation angles are ~0 (mod 2 pi)")
    pairs = _pairs(edge_frames, rotations, v)
    A, y = _axis_system(pairs)
    G = A.T @ A
    if np.linalg.matrix_rank(G, tol=1e-12 * max(np.abs(G).max(), 1e-300)) < 2:
        raise RankDeficient("edge directions do not constrain the rotation axis")
    best = None
    for cand in _unit_constrained_lsq(G, A.T @ y):
        if abs(cand[2]) < 1e-6:
            raise RankDeficient("rotation axis lies in the z = 0 plane; centre gauge undefined")
        cand = sign_canonical(cand) if np.allclose(y, 0.0, atol=1e-12) else cand
        X_R, rms = _solve_center(pairs, cand)
        if best is None or rms < best[2] - 1e-12:
            best = (cand, X_R, rms)
    n, X_R = best[0], best[1]
    if _half_turns_only(rotations) and sign_canonical(n)[0] != n[0]:
        # the sign of n is not observable from half turns
        n = -n
        X_R, _ = _solve_center(pairs, n)
    return n, X_R


def _half_turns_only(rotations, tol=0.05):
    return all(abs(np.cos(0.5 * r.theta)) < tol for r in rotations)


# -- maximum-likelihood refinement -----------------------------------------

def _whitener(cov):
    """Upper-triangular ``W`` with ``W' W = inv(cov)``."""
    L = np.linalg.cholesky(cov)
    return np.linalg.inv(L)


class _Problem:
    """Stacked Mahalanobis residuals with latent line and point variables.

    Parameters (local increments):
      v (2), n (2), X_R (2), tip point (3),
      per rotation pair: angle (1), line direction (2), line offset (2),
      then per point (along-line position, depth) for frame i and frame k.
    """

    def __init__(self, tip_frames, pairs, sensor_only=False):
        self.sensor_only = sensor_only
        self.tips = [f.centers[0] for f in tip_frames if f.kind == TIP]
        self.tip_W = [_whitener(c.Sigma_S) for c in self.tips]
        self.pairs = [] if sensor_only else pairs
        self.pair_data = []
        for r, fi, fk in self.pairs:
            ci, ck = fi.centers, fk.centers
            self.pair_data.append(dict(
                reading=r, ci=ci, ck=ck,
                Wi=[_whitener(c.Sigma_S) for c in ci], Wk=[_whitener(c.Sigma_S) for c in ck],
                sdi=np.sqrt([c.sigma_d for c in ci]), sdk=np.sqrt([c.sigma_d for c in ck]),
            ))
        # layout
        self.i_v = 0
        self.i_n = 2
        self.i_xr = 4
        off = 2 if sensor_only else 6
        self.i_tip = off
        off += 3 if self.tips else 0
        self.pair_off = []
        for pd in self.pair_data:
            self.pair_off.append(off)
            off += 5 + 2 * (len(pd["ci"]) + len(pd["ck"]))
        self.n_params = off
        self.n_res = 3 * len(self.tips) + sum(
            1 + 4 * (len(pd["ci"]) + len(pd["ck"])) for pd in self.pair_data)

    # state is a dict of current values
    def init_state(self, v, n, X_R):
        st = {"v": unit(v), "n": unit(n), "X_R": np.array([X_R[0], X_R[1], 0.0])}
        if self.tips:
            st["X_C"] = np.mean([c.S + c.d * st["v"] for c in self.tips], axis=0)
        st["pairs"] = []
        for pd in self.pair_data:
            r = pd["reading"]
            xi = np.array([c.S + c.d * st["v"] for c in pd["ci"]])
            xk = np.array([c.S + c.d * st["v"] for c in pd["ck"]])
            Rinv = rotation_matrix(st["n"], -r.theta)
            xk_back = (Rinv @ (xk - st["X_R"]).T).T + st["X_R"]
            e = oriented_edge(np.vstack([xi, xk_back]))
            p0 = e.point
            st["pairs"].append({
                "theta": float(r.theta), "q": e.q, "p0": p0,
                "li": (xi - p0) @ e.q, "di": np.array([c.d for c in pd["ci"]]),
                "lk": (xk_back - p0) @ e.q, "dk": np.array([c.d for c in pd["ck"]]),
            })
        return st

    def residuals(self, st, jac=False):
        r = np.empty(self.n_res)
        J = np.zeros((self.n_res, self.n_params)) if jac else None
        v, n, X_R = st["v"], st["n"], st["X_R"]
        Bv = tangent_basis(v)
        Bn = tangent_basis(n)
        row = 0
        for c, W in zip(self.tips, self.tip_W):
            pred = st["X_C"] - c.d * v
            r[row:row + 3] = W @ (c.S - pred)
            if jac:
                J[row:row + 3, self.i_v:self.i_v + 2] = W @ (c.d * Bv)
                J[row:row + 3, self.i_tip:self.i_tip + 3] = -W
            row += 3
        for pd, ps, off in zip(self.pair_data, st["pairs"], self.pair_off):
            rd = pd["reading"]
            th = ps["theta"]
            q, p0 = ps["q"], ps["p0"]
            Bq = tangent_basis(q)
            sig_t = np.sqrt(rd.sigma_theta)
            r[row] = (rd.theta - th) / sig_t
            if jac:
                J[row, off] = -1.0 / sig_t
            row += 1
            i_q, i_p = off + 1, off + 3
            i_pts = off + 5
            # frame i: points on the line itself
            for j, (c, W, sd) in enumerate(zip(pd["ci"], pd["Wi"], pd["sdi"])):
                lam, dh = ps["li"][j], ps["di"][j]
                X = p0 + lam * q
                r[row:row + 3] = W @ (c.S - (X - dh * v))
                r[row + 3] = (c.d - dh) / sd
                if jac:
                    il, idd = i_pts + 2 * j, i_pts + 2 * j + 1
                    J[row:row + 3, i_p:i_p + 2] = -W @ Bq
                    J[row:row + 3, i_q:i_q + 2] = -W @ (lam * Bq)
                    J[row:row + 3, il] = -W @ q
                    J[row:row + 3, idd] = W @ v
                    J[row:row + 3, self.i_v:self.i_v + 2] = W @ (dh * Bv)
                    J[row + 3, idd] = -1.0 / sd
                row += 4
            # frame k: points on the rotated line
            K = skew(n)
            R = np.eye(3) + np.sin(th) * K + (1 - np.cos(th)) * (K @ K)
            dR = np.cos(th) * K + np.sin(th) * (K @ K)
            base = i_pts + 2 * len(pd["ci"])
            for j, (c, W, sd) in enumerate(zip(pd["ck"], pd["Wk"], pd["sdk"])):
                lam, dh = ps["lk"][j], ps["dk"][j]
                P = p0 + lam * q - X_R
                X = R @ P + X_R
                r[row:row + 3] = W @ (c.S - (X - dh * v))
                r[row + 3] = (c.d - dh) / sd
                if jac:
                    il, idd = base + 2 * j, base + 2 * j + 1
                    J[row:row + 3, i_p:i_p + 2] = -W @ (R @ Bq)
                    J[row:row + 3, i_q:i_q + 2] = -W @ (lam * (R @ Bq))
                    J[row:row + 3, il] = -W @ (R @ q)
                    J[row:row + 3, idd] = W @ v
                    J[row:row + 3, self.i_v:self.i_v + 2] = W @ (dh * Bv)
                    J[row:row + 3, off] = -W @ (dR @ P)
                    dRn = (-np.sin(th) * skew(P)
                           + (1 - np.cos(th)) * (np.outer(n, P) + np.dot(n, P) * np.eye(3)))
                    J[row:row + 3, self.i_n:self.i_n + 2] = -W @ (dRn @ Bn)
                    J[row:row + 3, self.i_xr:self.i_xr + 2] = -W @ (np.eye(3) - R)[:, :2]
                    J[row + 3, idd] = -1.0 / sd
                row += 4
        return (r, J) if jac else r

    def retract(self, st, delta):
        """Apply a local increment and return the new state."""
        new = {"v": unit(st["v"] + tangent_basis(st["v"]) @ delta[0:2])}
        if self.sensor_only:
            new["n"], new["X_R"] = st["n"], st["X_R"]
        else:
            new["n"] = unit(st["n"] + tangent_basis(st["n"]) @ delta[self.i_n:self.i_n + 2])
            xr = st["X_R"].copy()
            xr[:2] += delta[self.i_xr:self.i_xr + 2]
            new["X_R"] = xr
        if self.tips:
            new["X_C"] = st["X_C"] + delta[self.i_tip:self.i_tip + 3]
        new["pairs"] = []
        for pd, ps, off in zip(self.pair_data, st.get("pairs", []), self.pair_off):
            Bq = tangent_basis(ps["q"])
            ni, nk = len(pd["ci"]), len(pd["ck"])
            pts = delta[off + 5: off + 5 + 2 * (ni + nk)]
            new["pairs"].append({
                "theta": ps["theta"] + delta[off],
                "q": unit(ps["q"] + Bq @ delta[off + 1:off + 3]),
                "p0": ps["p0"] + Bq @ delta[off + 3:off + 5],
                "li": ps["li"] + pts[0:2 * ni:2], "di": ps["di"] + pts[1:2 * ni:2],
                "lk": ps["lk"] + pts[2 * ni::2], "dk": ps["dk"] + pts[2 * ni + 1::2],
            })
        return new


@dataclass
class LMResult:
    state: dict
    cost: float
    iterations: int
    converged: bool
    singular: bool
    history: list
    JTJ: np.ndarray


def levenberg_marquardt(problem, state, max_iter=200, ftol=1e-10, gtol=1e-8, tau=1e-3):
    """Minimize ``0.5 |r|^2`` with Marquardt-scaled damping.

    Stops when an accepted step lowers the cost by less than ``ftol``
    (relative) or the gradient infinity-norm drops below ``gtol``.
    """
    r, J = problem.residuals(state, jac=True)
    cost = 0.5 * float(r @ r)
    history = [cost]
    A = J.T @ J
    g = J.T @ r
    mu = tau * max(np.diag(A).max(), 1e-300)
    nu = 2.0
    converged = False
    singular = False
    it = 0
    if np.abs(g).max() < gtol:
        return LMResult(state, cost, 0, True, False, history, A)
    while it < max_iter:
        it += 1
        D = np.maximum(np.diag(A), 1e-12 * max(np.diag(A).max(), 1e-300))
        try:
            delta = np.linalg.solve(A + mu * np.diag(D), -g)
        except np.linalg.LinAlgError:
            mu *= nu
            nu *= 2.0
            if mu > 1e20:
                singular = True
                break
            continue
        new = problem.retract(state, delta)
        r_new = problem.residuals(new)
        cost_new = 0.5 * float(r_new @ r_new)
        pred = -(delta @ g) - 0.5 * delta @ (A @ delta)
        rho = (cost - cost_new) / pred if pred > 0 else -1.0
        if rho > 0 and cost_new < cost:
            rel = (cost - cost_new) / max(cost, 1e-300)
            state, cost = new, cost_new
            history.append(cost)
            r, J = problem.residuals(state, jac=True)
            A = J.T @ J
            g = J.T @ r
            mu *= max(1.0 / 3.0, 1.0 - (2.0 * rho - 1.0) ** 3)
            nu = 2.0
            if rel < ftol or np.abs(g).max() < gtol:
                converged = True
                break
        else:
            mu *= nu
            nu *= 2.0
            if mu > 1e20:
                # no downhill step exists at machine precision; accept if the
                # gradient is round-off relative to |J| |r|
                scale = np.sqrt(np.diag(A).max()) * np.sqrt(2.0 * cost)
                converged = np.abs(g).max() < max(1e3 * gtol, 1e-6 * scale) or cost < 1e-12
                singular = not converged
                break
    if singular:
        warnings.warn("normal equations stayed singular after damping", SingularNormalEquations,
                      stacklevel=3)
    return LMResult(state, cost, it, converged, singular, history, A)


def _edge_pairs_for(edge_frames, rotations):
    frames = {f.frame_id: f for f in edge_frames if f.kind == EDGE}
    out = []
    for r in rotations:
        if r.frame_i not in frames or r.frame_k not in frames:
            raise InvalidParameter(f"rotation {r.frame_i}->{r.frame_k} refers to unknown edge frames")
        out.append((r, frames[r.frame_i], frames[r.frame_k]))
    return out


def incidence_rms(v, n, X_R, edge_frames, rotations):
    """RMS distance (mm) of rotated edge points from their partner edge, both directions."""
    pairs = _pairs(edge_frames, rotations, v)
    dist = []
    for r, pi, pk, ei, ek in pairs:
        for theta, src, dst in ((r.theta, pi, ek), (-r.theta, pk, ei)):
            R = rotation_matrix(n, theta)
            moved = (R @ (src - X_R).T).T + X_R
            dist.append(point_edge_distance(dst, moved))
    if not dist:
        return float("nan")
    d = np.concatenate(dist)
    return float(np.sqrt(np.mean(d ** 2)))


def _covariance(problem, JTJ):
    cov_full = np.linalg.pinv(JTJ, rcond=1e-13)
    out = np.zeros((7, 7))
    if problem.sensor_only:
        out[0:2, 0:2] = cov_full[0:2, 0:2]
    else:
        out[0:6, 0:6] = cov_full[0:6, 0:6]
    return out


def initial_state(tip_frames, edge_frames, rotations):
    """Closed-form calibration (beam, then turntable)."""
    v = calibrate_beam(tip_frames)
    n, X_R = calibrate_turntable(edge_frames, rotations, v)
    rms = incidence_rms(v, n, X_R, edge_frames, list(rotations))
    return CalibrationState(v, n, X_R, residual_rms=rms, meta={"stage": "closed-form"})


def refine_mle(state0, tip_frames, edge_frames, rotations, max_iter=200):
    """Joint Levenberg-Marquardt refinement of ``v``, ``n`` and ``X_R``.

    Each edge pair contributes its measured rotation angle and, for every
    centre point of both frames, the stage reading and depth; the unknown
    filament line and the true position of each point along it are carried as
    nuisance parameters, so the objective is the exact Gaussian likelihood
    rather than a linearized surrogate.  Tip centres contribute their stage
    readings about a common, unknown tip point.
    """
    rotations = list(rotations)
    tips = [f for f in tip_frames if f.kind == TIP]
    prob = _Problem(tips, _edge_pairs_for(edge_frames, rotations))
    st = prob.init_state(state0.v, state0.n, state0.X_R)
    res = levenberg_marquardt(prob, st, max_iter=max_iter)
    s = res.state
    v, n = s["v"], s["n"]
    return CalibrationState(
        v, n, s["X_R"], _covariance(prob, res.JTJ),
        residual_rms=incidence_rms(v, n, s["X_R"], edge_frames, rotations),
        cost=res.cost, iterations=res.iterations, converged=res.converged,
        singular=res.singular, cost_history=tuple(res.history),
        basis_v=tangent_basis(v), basis_n=tangent_basis(n),
        meta={"stage": "mle", "n_params": prob.n_params, "n_residuals": prob.n_res},
    )


def refine_sensor_only(v0, tip_frames, max_iter=200):
    """Beam-direction refinement from tip centres alone (turntable already known)."""
    tips = [f for f in tip_frames if f.kind == TIP]
    if len(tips) < 2:
        raise DegeneratePoints("need at least two TIP frames")
    prob = _Problem(tips, [], sensor_only=True)
    st = prob.init_state(v0, np.array([0.0, 0.0, 1.0]), np.zeros(3))
    res = levenberg_marquardt(prob, st, max_iter=max_iter)
    return res.state["v"]


def sensor_only_objective(v, tip_frames):
    """Weighted tip objective with the tip point eliminated in closed form."""
    tips = [f.centers[0] for f in tip_frames if f.kind == TIP]
    Ws = [np.linalg.inv(c.Sigma_S) for c in tips]
    y = [c.S + c.d * v for c in tips]
    X_C = np.linalg.solve(sum(Ws), sum(W @ yi for W, yi in zip(Ws, y)))
    return 0.5 * sum((yi - X_C) @ W @ (yi - X_C) for W, yi in zip(Ws, y))


def calibrate(tip_frames, edge_frames, rotations, refine=True):
    """Closed-form initialization followed (optionally) by MLE refinement."""
    rotations = list(rotations)
    s0 = initial_state(tip_frames, edge_frames, rotations)
    if not refine:
        return s0, s0
    return s0, refine_mle(s0, tip_frames, edge_frames, rotations)


# -- session and report files ---------------------------------------------

SESSION_FORMAT = "pdm2-calibration-session"


def write_session(path, raws, angles, header=None):
    """Write a calibration session (JSON lines).

    ``raws`` holds dicts with keys frame, kind, center, S, d, amp;
    ``angles`` dicts with frame_i, frame_k, theta and optional sigma_theta.
    """
    head = {"record": "HEADER", "format": SESSION_FORMAT, "version": 1,
            "units": {"length": "mm", "angle": "rad"},
            "floor_S_mm2": COV_FLOOR_MM2, "floor_d_mm2": COV_FLOOR_MM2,
            "sigma_theta_rad2": DEFAULT_SIGMA_THETA, "threshold_frac": DEFAULT_THRESHOLD_FRAC}
    head.update(header or {})
    with open(path, "w") as fh:
        fh.write(json.dumps(head) + "\n")
        for rw in raws:
            rec = {"record": "RAW", "frame": int(rw["frame"]), "kind": rw["kind"],
                   "center": int(rw.get("center", 0)),
                   "S": [float(x) for x in rw["S"]], "d": float(rw["d"]), "amp": float(rw["amp"])}
            if "turntable_angle" in rw:
                rec["turntable_angle"] = float(rw["turntable_angle"])
            fh.write(json.dumps(rec) + "\n")
        for a in angles:
            rec = {"record": "ANGLE", "frame_i": int(a["frame_i"]), "frame_k": int(a["frame_k"]),
                   "theta": float(a["theta"])}
            if "sigma_theta" in a:
                rec["sigma_theta"] = float(a["sigma_theta"])
            fh.write(json.dumps(rec) + "\n")


def read_session(path):
    """Parse a session file into ``(header, raws, angles)``."""
    try:
        with open(path) as fh:
            lines = [ln for ln in fh if ln.strip()]
    except OSError as exc:
        raise FormatError(f"cannot read session {path}: {exc}") from exc
    try:
        recs = [json.loads(ln) for ln in lines]
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: malformed record ({exc})") from exc
    if not recs or recs[0].get("record") != "HEADER" or recs[0].get("format") != SESSION_FORMAT:
        raise FormatError(f"{path}: missing calibration-session header")
    raws = [r for r in recs if r.get("record") == "RAW"]
    angles = [r for r in recs if r.get("record") == "ANGLE"]
    return recs[0], raws, angles


def session_to_frames(header, raws, angles):
    """Group raw points into frames and centre points."""
    thr = header.get("threshold_frac", DEFAULT_THRESHOLD_FRAC)
    floor = header.get("floor_S_mm2", COV_FLOOR_MM2)
    groups = {}
    kinds = {}
    tt = {}
    for rw in raws:
        key = (int(rw["frame"]), int(rw.get("center", 0)))
        groups.setdefault(key, []).append(RawPoint(rw["S"], rw["d"], rw["amp"]))
        kinds[int(rw["frame"])] = rw["kind"]
        tt[int(rw["frame"])] = float(rw.get("turntable_angle", 0.0))
    frames = []
    for fid in sorted(kinds):
        centers = [extract_center(groups[k], thr, floor) for k in sorted(groups) if k[0] == fid]
        frames.append(FrameScan(fid, kinds[fid], centers, tt[fid]))
    sig = header.get("sigma_theta_rad2", DEFAULT_SIGMA_THETA)
    rots = [RotationReading(int(a["frame_i"]), int(a["frame_k"]), float(a["theta"]),
                            float(a.get("sigma_theta", sig))) for a in angles]
    tips = [f for f in frames if f.kind == TIP]
    edges = [f for f in frames if f.kind == EDGE]
    return tips, edges, rots


def state_to_dict(state):
    return {
        "v": state.v.tolist(),
        "n": state.n.tolist(),
        "X_R_mm": state.X_R.tolist(),
        "residual_rms_mm": state.residual_rms,
        "cost": state.cost,
        "iterations": state.iterations,
        "converged": state.converged,
        "singular": state.singular,
        "covariance": state.covariance.tolist(),
        "covariance_order": ["v_t1", "v_t2", "n_t1", "n_t2", "X_R_x", "X_R_y", "X_R_z"],
        "basis_v": state.basis_v.tolist(),
        "basis_n": state.basis_n.tolist(),
        "gauge": "X_R is the axis crossing of the plane z = 0",
        "meta": state.meta,
    }


def state_from_dict(doc):
    try:
        return CalibrationState(
            np.array(doc["v"]), np.array(doc["n"]), np.array(doc["X_R_mm"]),
            np.array(doc.get("covariance", np.zeros((7, 7)))),
            residual_rms=float(doc.get("residual_rms_mm", float("nan")) or float("nan")),
            cost=float(doc.get("cost", float("nan")) or float("nan")),
            iterations=int(doc.get("iterations", 0)),
            converged=bool(doc.get("converged", True)),
            singular=bool(doc.get("singular", False)),
            basis_v=np.array(doc["basis_v"]) if "basis_v" in doc else None,
            basis_n=np.array(doc["basis_n"]) if "basis_n" in doc else None,
            meta=dict(doc.get("meta", {})),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed calibration state: {exc}") from exc


def format_table(state):
    """Plain-text parameter table (v, n, X_R)."""
    def row(name, x, fmt):
        return f"{name:<10} [{'; '.join(format(c, fmt) for c in x)}]"
    return "\n".join([
        "Calibration parameters",
        row("v", state.v, "9.4f"),
        row("n", state.n, "9.4f"),
        row("X_R (mm)", state.X_R, "9.2f"),
    ])


def write_report(path, closed_form, refined, extra=None):
    doc = {
        "format": "pdm2-calibration-report",
        "parameters": state_to_dict(refined),
        "closed_form": state_to_dict(closed_form),
        "table": format_table(refined).splitlines(),
        "residual_stacking": ("tip: stage reading (3) per tip centre; pair: angle (1), then per "
                              "centre of frame i and frame k: stage reading (3), depth (1)"),
    }
    doc.update(extra or {})
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def read_report(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read calibration report {path}: {exc}") from exc
    if "parameters" not in doc:
        raise FormatError(f"{path}: not a calibration report")
    return state_from_dict(doc["parameters"])
