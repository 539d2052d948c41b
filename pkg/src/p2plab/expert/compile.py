"""Lower a ModelIR to the dense QP form ``min 1/2 x'Px + q'x, l <= Ax <= u``.

The (P, A) structure depends only on the IR; q, l and u are assembled from
data on every solve so one factorisation serves a whole receding-horizon run.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DataError
from .ir import ModelIR
from .qp import QPSolver

BIG = np.inf


def data_value(data: dict, ref: str, t: int | None = None) -> float:
    try:
        v = data[ref]
    except KeyError:
        raise DataError(f"data reference {ref!r} not provided") from None
    if np.ndim(v) == 0:
        return float(v)
    if t is None:
        raise DataError(f"data reference {ref!r} is a series; a step index is required")
    return float(v[t])


@dataclass
class CompiledModel:
    ir: ModelIR
    n: int
    P: np.ndarray
    A: np.ndarray
    offsets: dict[str, int]
    # affine pieces: constant vectors plus (index, scale, ref, t) entries
    q_const: np.ndarray
    q_refs: list = field(default_factory=list)
    l_const: np.ndarray = None
    u_const: np.ndarray = None
    l_refs: list = field(default_factory=list)
    u_refs: list = field(default_factory=list)
    u_cap_refs: list = field(default_factory=list)  # u[row] = min(u[row], scale * data)
    abs_checks: list = field(default_factory=list)  # (scale, ref) pairs that must be >= 0
    row_names: list = field(default_factory=list)
    _solver: QPSolver | None = None

    def assemble(self, data: dict):
        q = self.q_const.copy()
        for idx, scale, ref, t in self.q_refs:
            q[idx] += scale * data_value(data, ref, t)
        l = self.l_const.copy()
        u = self.u_const.copy()
        for row, scale, ref, t in self.l_refs:
            l[row] += scale * data_value(data, ref, t)
        for row, scale, ref, t in self.u_refs:
            u[row] += scale * data_value(data, ref, t)
        for row, scale, ref, t in self.u_cap_refs:
            u[row] = min(u[row], scale * data_value(data, ref, t))
        for scale, ref, t in self.abs_checks:
            if scale * data_value(data, ref, t) < 0:
                raise DataError(f"absolute-value term weighted by {ref!r} has a negative coefficient")
        return q, l, u

    def solver(self, **kwargs) -> QPSolver:
        if self._solver is None or kwargs:
            self._solver = QPSolver(self.P, self.A, **kwargs)
        return self._solver

    def unpack(self, x) -> dict[str, np.ndarray]:
        H = self.ir.horizon
        return {name: np.asarray(x[off: off + H]) for name, off in self.offsets.items()}


def compile_ir(ir: ModelIR) -> CompiledModel:
    H = ir.horizon
    offsets: dict[str, int] = {}
    n = 0
    for v in ir.variables:
        offsets[v.name] = n
        n += H
    # one auxiliary epigraph vector per abs term
    abs_terms = [t for t in ir.objective if t.kind == "abs"]
    aux_off = []
    for _ in abs_terms:
        aux_off.append(n)
        n += H

    P = np.zeros((n, n))
    q_const = np.zeros(n)
    q_refs: list = []
    abs_checks: list = []

    def steps(term):
        if term.at is None:
            return range(H)
        return [term.at % H]

    rows: list[np.ndarray] = []
    l_const: list[float] = []
    u_const: list[float] = []
    l_refs: list = []
    u_refs: list = []
    u_cap_refs: list = []
    names: list[str] = []

    def add_row(coefs: dict[int, float], lo: float, hi: float, name: str) -> int:
        r = np.zeros(n)
        for k, c in coefs.items():
            r[k] += c
        rows.append(r)
        l_const.append(lo)
        u_const.append(hi)
        names.append(name)
        return len(rows) - 1

    ai = 0
    for term in ir.objective:
        off = offsets[term.var]
        for t in steps(term):
            if term.kind == "quad":
                if term.coef_ref is not None:
                    raise DataError("quadratic terms must have constant coefficients")
                P[off + t, off + t] += 2.0 * term.coef
            elif term.kind == "lin":
                if term.coef_ref is None:
                    q_const[off + t] += term.coef
                else:
                    q_refs.append((off + t, term.coef, term.coef_ref, t))
            elif term.kind == "abs":
                s = aux_off[ai] + t
                if term.coef_ref is None:
                    q_const[s] += term.coef
                else:
                    q_refs.append((s, term.coef, term.coef_ref, t))
                    abs_checks.append((term.coef, term.coef_ref, t))
                add_row({s: 1.0, off + t: -1.0}, 0.0, BIG, f"abs[{term.var}]+@{t}")
                add_row({s: 1.0, off + t: 1.0}, 0.0, BIG, f"abs[{term.var}]-@{t}")
            else:
                raise DataError(f"unknown objective term kind {term.kind!r}")
        if term.kind == "abs":
            ai += 1

    for c in ir.constraints:
        for t in range(H):
            coefs: dict[int, float] = {}
            init_shift = []
            for lt in c.terms:
                tt = t + lt.shift
                if tt < 0:
                    init_shift.append(lt)
                    continue
                if tt >= H:
                    raise DataError(f"constraint {c.name} looks past the horizon")
                k = offsets[lt.var] + tt
                coefs[k] = coefs.get(k, 0.0) + lt.coef
            if c.sense == "eq":
                lo, hi = c.rhs, c.rhs
            elif c.sense == "le":
                lo, hi = -BIG, c.rhs
            elif c.sense == "ge":
                lo, hi = c.rhs, BIG
            else:
                raise DataError(f"unknown constraint sense {c.sense!r}")
            row = add_row(coefs, lo, hi, f"{c.name}@{t}")
            entries = []
            if c.rhs_ref is not None:
                entries.append((c.rhs_scale, c.rhs_ref, t))
            for lt in init_shift:
                entries.append((-lt.coef, f"init.{lt.var}", None))
            for scale, ref, tt in entries:
                if c.sense in ("eq", "ge"):
                    l_refs.append((row, scale, ref, tt))
                if c.sense in ("eq", "le"):
                    u_refs.append((row, scale, ref, tt))

    for v in ir.variables:
        off = offsets[v.name]
        lo = -BIG if v.lb is None else v.lb
        hi = BIG if v.ub is None else v.ub
        for t in range(H):
            row = add_row({off + t: 1.0}, lo, hi, f"bound[{v.name}]@{t}")
            if v.ub_ref is not None:
                u_cap_refs.append((row, v.ub_scale, v.ub_ref, t))

    A = np.array(rows) if rows else np.zeros((0, n))
    return CompiledModel(
        ir=ir, n=n, P=P, A=A, offsets=offsets, q_const=q_const, q_refs=q_refs,
        l_const=np.array(l_const), u_const=np.array(u_const), l_refs=l_refs,
        u_refs=u_refs, u_cap_refs=u_cap_refs, abs_checks=abs_checks, row_names=names,
    )
