"""Operator-splitting (ADMM) solver for convex quadratic programs.

Solves ``min 1/2 x'Px + q'x  s.t.  l <= Ax <= u`` with the splitting used by
OSQP: Ruiz equilibration, a cached Cholesky factor of the reduced KKT system
per step size, adaptive step size, infeasibility certificates and a final
active-set polish.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError

INF = np.inf
RHO_EQ_FACTOR = 1e3
RHO_MIN, RHO_MAX = 1e-6, 1e6


@dataclass
class QPResult:
    x: np.ndarray
    y: np.ndarray
    status: str
    iterations: int
    prim_res: float
    dual_res: float
    objective: float
    polished: bool = False

    @property
    def solved(self) -> bool:
        return self.status == "solved"


def kkt_residuals(P, q, A, l, u, x, y) -> dict:
    """Stationarity, primal feasibility and complementarity residuals (inf-norms).

    Sign convention: ``y_i > 0`` prices the upper bound, ``y_i < 0`` the lower.
    """
    Ax = A @ x
    stat = P @ x + q + A.T @ y
    prim = np.maximum(Ax - u, 0.0) + np.maximum(l - Ax, 0.0)
    yp = np.maximum(y, 0.0)
    yn = np.maximum(-y, 0.0)
    with np.errstate(invalid="ignore"):
        comp_u = np.abs(np.minimum(yp, u - Ax))
        comp_l = np.abs(np.minimum(yn, Ax - l))
    comp = np.maximum(np.nan_to_num(comp_u, nan=0.0), np.nan_to_num(comp_l, nan=0.0))
    out = {
        "stationarity": float(np.max(np.abs(stat), initial=0.0)),
        "primal": float(np.max(prim, initial=0.0)),
        "complementarity": float(np.max(comp, initial=0.0)),
    }
    out["max"] = max(out.values())
    return out


def _inf_norm(v) -> float:
    return float(np.max(np.abs(v), initial=0.0))


class QPSolver:
    """ADMM solver bound to a fixed (P, A) structure; q, l, u vary per solve."""

    def __init__(
        self,
        P,
        A,
        rho: float = 0.1,
        sigma: float = 1e-6,
        alpha: float = 1.6,
        eps_abs: float = 1e-6,
        eps_inf: float = 1e-5,
        max_iter: int = 20000,
        check_every: int = 10,
        adapt_every: int = 50,
        polish_every: int = 20,
        scaling_iters: int = 10,
        polish: bool = True,
    ):
        self.P = np.asarray(P, dtype=float)
        self.A = np.asarray(A, dtype=float)
        self.n = self.P.shape[0]
        self.m = self.A.shape[0]
        if self.P.shape != (self.n, self.n) or self.A.shape[1] != self.n:
            raise ValueError("inconsistent QP dimensions")
        self.rho0 = rho
        self.sigma = sigma
        self.alpha = alpha
        self.eps_abs = eps_abs
        self.eps_inf = eps_inf
        self.max_iter = max_iter
        self.check_every = check_every
        self.adapt_every = adapt_every
        self.polish_every = polish_every
        self.polish = polish
        self._scale(scaling_iters)
        self._factors: dict = {}

    def _scale(self, iters: int) -> None:
        n, m = self.n, self.m
        D = np.ones(n)
        E = np.ones(m)
        Ps = self.P.copy()
        As = self.A.copy()
        for _ in range(iters):
            col = np.maximum(np.max(np.abs(Ps), axis=0, initial=0.0), np.max(np.abs(As), axis=0, initial=0.0))
            row = np.max(np.abs(As), axis=1, initial=0.0)
            dd = 1.0 / np.sqrt(np.where(col < 1e-4, 1.0, col))
            ee = 1.0 / np.sqrt(np.where(row < 1e-4, 1.0, row))
            Ps = dd[:, None] * Ps * dd[None, :]
            As = ee[:, None] * As * dd[None, :]
            D *= dd
            E *= ee
        mean_col = float(np.mean(np.max(np.abs(Ps), axis=0, initial=0.0))) if n else 0.0
        self.c = 1.0 / max(mean_col, 1.0)
        self.D, self.E = D, E
        self.Ps = self.c * Ps
        self.As = As

    def _rho_vec(self, rho, l, u):
        r = np.full(self.m, rho)
        eq = np.abs(u - l) < 1e-10
        free = np.isinf(l) & np.isinf(u)
        r[eq] = RHO_EQ_FACTOR * rho
        r[free] = RHO_MIN
        return r

    def _factor(self, rho_vec):
        key = rho_vec.tobytes()
        f = self._factors.get(key)
        if f is None:
            K = self.Ps + self.sigma * np.eye(self.n) + self.As.T @ (rho_vec[:, None] * self.As)
            f = cho_factor(K, check_finite=False)
            if len(self._factors) > 16:
                self._factors.clear()
            self._factors[key] = f
        return f

    def solve(self, q, l, u, x0=None, y0=None) -> QPResult:
        q = np.asarray(q, float)
        l = np.asarray(l, float)
        u = np.asarray(u, float)
        if np.any(l > u + 1e-12):
            return QPResult(np.zeros(self.n), np.zeros(self.m), "infeasible", 0, INF, INF, INF)
        D, E, c = self.D, self.E, self.c
        qs = c * D * q
        ls = E * l
        us = E * u
        Ps, As, AsT = self.Ps, self.As, self.As.T.copy()

        x = np.zeros(self.n) if x0 is None else np.asarray(x0, float) / D
        y = np.zeros(self.m) if y0 is None else c * np.asarray(y0, float) / E
        z = np.clip(As @ x, ls, us)
        rho = self.rho0
        rv = self._rho_vec(rho, ls, us)
        fac = self._factor(rv)
        alpha, sigma = self.alpha, self.sigma
        status = "max_iter"
        prim = dual = INF
        it = 0
        for it in range(1, self.max_iter + 1):
            x_prev, y_prev = x, y
            rhs = sigma * x - qs + AsT @ (rv * z - y)
            xt = cho_solve(fac, rhs, check_finite=False)
            zt = As @ xt
            x = alpha * xt + (1 - alpha) * x
            zr = alpha * zt + (1 - alpha) * z
            z = np.clip(zr + y / rv, ls, us)
            y = y + rv * (zr - z)

            if it % self.check_every:
                continue
            Ax = As @ x
            Px = Ps @ x
            Aty = AsT @ y
            prim = _inf_norm((Ax - z) / E)
            dual = _inf_norm((Px + qs + Aty) / D) / c
            if prim <= self.eps_abs and dual <= self.eps_abs:
                status = "solved"
                break
            if self._primal_infeasible(y - y_prev, ls, us):
                status = "infeasible"
                break
            if self._dual_infeasible(x - x_prev, qs, ls, us):
                status = "unbounded"
                break
            if self.polish and it % self.polish_every == 0:
                early = self._try_polish(q, l, u, D * x, E * y / c)
                if early is not None:
                    xp, yp, kkt = early
                    return QPResult(xp, yp, "solved", it, kkt["primal"], kkt["stationarity"],
                                    float(0.5 * xp @ self.P @ xp + q @ xp), True)
            if it % self.adapt_every == 0:
                p_s = _inf_norm(Ax - z) / max(_inf_norm(Ax), _inf_norm(z), 1e-12)
                d_s = _inf_norm(Px + qs + Aty) / max(_inf_norm(Px), _inf_norm(Aty), _inf_norm(qs), 1e-12)
                new_rho = float(np.clip(rho * np.sqrt(p_s / max(d_s, 1e-12)), RHO_MIN, RHO_MAX))
                if new_rho > 5 * rho or new_rho < 0.2 * rho:
                    rho = new_rho
                    rv = self._rho_vec(rho, ls, us)
                    fac = self._factor(rv)

        xu = D * x
        yu = E * y / c
        obj = 0.5 * xu @ self.P @ xu + q @ xu
        res = QPResult(xu, yu, status, it, prim, dual, float(obj))
        if status in ("infeasible", "unbounded"):
            return res
        if self.polish:
            pol = self._polish(q, l, u, xu, yu)
            if pol is not None:
                res_kkt = kkt_residuals(self.P, q, self.A, l, u, xu, yu)["max"]
                kkt = kkt_residuals(self.P, q, self.A, l, u, pol[0], pol[1])
                pol_kkt = kkt["max"]
                if pol_kkt < max(res_kkt, 1e-9) or (status != "solved" and pol_kkt <= self.eps_abs):
                    xp, yp = pol
                    res = QPResult(xp, yp, "solved" if pol_kkt <= self.eps_abs else status,
                                   it, kkt["primal"], kkt["stationarity"],
                                   float(0.5 * xp @ self.P @ xp + q @ xp), True)
        return res

    def _try_polish(self, q, l, u, x, y):
        pol = self._polish(q, l, u, x, y)
        if pol is None:
            return None
        kkt = kkt_residuals(self.P, q, self.A, l, u, pol[0], pol[1])
        if kkt["max"] <= self.eps_abs:
            return pol[0], pol[1], kkt
        return None

    def _primal_infeasible(self, dy, ls, us) -> bool:
        norm = _inf_norm(self.E * dy)
        if norm < 1e-12:
            return False
        eps = self.eps_inf * norm
        if _inf_norm(self.As.T @ dy / self.D) > eps:
            return False
        pos = np.maximum(dy, 0.0)
        neg = np.minimum(dy, 0.0)
        if np.any((pos > 0) & np.isinf(us)) or np.any((neg < 0) & np.isinf(ls)):
            return False
        val = np.dot(np.where(pos > 0, us, 0.0), pos) + np.dot(np.where(neg < 0, ls, 0.0), neg)
        return val < -eps

    def _dual_infeasible(self, dx, qs, ls, us) -> bool:
        norm = _inf_norm(self.D * dx)
        if norm < 1e-12:
            return False
        eps = self.eps_inf * norm
        if _inf_norm(self.Ps @ dx / self.D) > self.c * eps:
            return False
        if qs @ dx >= -self.c * eps:
            return False
        Adx = (self.As @ dx) / self.E
        up_ok = np.where(np.isinf(us), True, Adx <= eps)
        lo_ok = np.where(np.isinf(ls), True, Adx >= -eps)
        return bool(np.all(up_ok & lo_ok))

    def _polish(self, q, l, u, x, y, max_passes: int = 25):
        """Solve the equality-constrained QP on a guessed active set.

        The guess comes from the ADMM iterate; rows whose multiplier has the
        wrong sign are released and violated rows are added, for a few passes.
        """
        Ax = self.A @ x
        eq = np.abs(u - l) < 1e-10
        low = eq | ((Ax - l) < -y)
        up = ~low & ((u - Ax) < y)
        out = None
        for _ in range(max_passes):
            sol = self._solve_active(q, l, u, low, up)
            if sol is None:
                return out
            xp, yp = sol
            out = sol
            # one change per pass: release the worst wrong-signed multiplier,
            # otherwise bind the most violated row
            wrong = np.where(low & ~eq, yp, 0.0) - np.where(up, yp, 0.0)
            k = int(np.argmax(wrong))
            if wrong[k] > 1e-9:
                low[k] = up[k] = False
                continue
            Axp = self.A @ xp
            free = ~low & ~up
            below = np.where(free, l - Axp, 0.0)
            above = np.where(free, Axp - u, 0.0)
            kl, ku = int(np.argmax(below)), int(np.argmax(above))
            if max(below[kl], above[ku]) <= 1e-9:
                break
            if below[kl] >= above[ku]:
                low[kl] = True
            else:
                up[ku] = True
        return out

    def _solve_active(self, q, l, u, low, up):
        act = np.flatnonzero(low | up)
        b = np.where(low, l, u)[act]
        if np.any(~np.isfinite(b)):
            return None
        Aa = self.A[act]
        k = len(act)
        delta = 1e-9
        K = np.block([[self.P + delta * np.eye(self.n), Aa.T], [Aa, -delta * np.eye(k)]])
        Kt = np.block([[self.P, Aa.T], [Aa, np.zeros((k, k))]])
        rhs = np.concatenate([-q, b])
        try:
            lu = _lu(K)
        except LinAlgError:
            return None
        sol = lu(rhs)
        for _ in range(10):
            r = rhs - Kt @ sol
            if _inf_norm(r) < 1e-12:
                break
            sol = sol + lu(r)
        xp = sol[: self.n]
        yp = np.zeros(self.m)
        yp[act] = sol[self.n:]
        if not np.all(np.isfinite(xp)):
            return None
        return xp, yp


def _lu(K):
    from scipy.linalg import lu_factor, lu_solve

    f = lu_factor(K, check_finite=False)
    return lambda r: lu_solve(f, r, check_finite=False)


def solve_qp(P, q, A, l, u, **kwargs) -> QPResult:
    return QPSolver(P, A, **kwargs).solve(q, l, u)
