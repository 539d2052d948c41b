"""Static checks, trial solve and automatic repair of generated models."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..errors import DataError, SolverError
from .ir import LinTerm, ModelIR, Term, Variable
from .schedule import solve_convex

log = logging.getLogger(__name__)

MAX_CORRECTIONS = 5
DEFAULT_BOX = 1e3
SLACK_PENALTY = 1e4


@dataclass
class Issue:
    code: str
    message: str
    fix_applied: str = ""


@dataclass
class CorrectionReport:
    iterations: int = 0
    issues: list[Issue] = field(default_factory=list)
    passed: bool = False

    @property
    def codes(self) -> list[str]:
        return [i.code for i in self.issues]

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "passed": self.passed,
            "issues": [vars(i) for i in self.issues],
        }


def _catalog(ir: ModelIR, name: str) -> dict | None:
    return ir.meta.get("catalog", {}).get(name)


def diagnose(ir: ModelIR, data: dict) -> list[Issue]:
    """Schema, convexity, bound and data-dimension checks (no solving)."""
    issues: list[Issue] = []
    declared = set(ir.var_names)
    for name in sorted(ir.referenced_vars() - declared):
        issues.append(Issue("UNDECLARED_VAR", f"variable {name!r} is referenced but not declared"))
    for term in ir.objective:
        if term.kind not in ("quad", "lin", "abs"):
            issues.append(Issue("UNKNOWN_TERM", f"objective term kind {term.kind!r}"))
        elif term.kind in ("quad", "abs") and term.coef < 0:
            issues.append(Issue("NONCONVEX_TERM", f"{term.kind} term on {term.var!r} has coefficient {term.coef}"))
    for v in ir.variables:
        if v.lb is not None and v.ub is not None and v.lb > v.ub:
            issues.append(Issue("CONTRADICTORY_BOUNDS", f"{v.name}: lb {v.lb} > ub {v.ub}"))
        elif not v.bounded:
            issues.append(Issue("UNBOUNDED_VAR", f"{v.name} lacks a finite lower or upper bound"))
    needed = set(ir.data_refs)
    for v in ir.variables:
        if v.ub_ref:
            needed.add(v.ub_ref)
    for name in sorted(needed):
        if name not in data:
            issues.append(Issue("MISSING_DATA", f"data reference {name!r} not supplied"))
        elif np.ndim(data[name]) > 0 and len(data[name]) < ir.horizon:
            issues.append(Issue(
                "DATA_DIMENSION",
                f"series {name!r} has {len(data[name])} points for horizon {ir.horizon}",
            ))
    return issues


def _fix(ir: ModelIR, issue: Issue, data: dict) -> str:
    """Apply an in-place repair for one issue; return a description or ''."""
    code = issue.code
    if code == "UNDECLARED_VAR":
        name = issue.message.split("'")[1]
        cat = _catalog(ir, name)
        if cat is not None:
            ir.variables.append(Variable(name, cat["lb"], cat["ub"], cat.get("ub_ref"), cat.get("ub_scale", 1.0)))
            return f"declared {name} from device catalog"
        ir.objective = [t for t in ir.objective if t.var != name]
        for c in ir.constraints:
            c.terms = [t for t in c.terms if t.var != name]
        ir.constraints = [c for c in ir.constraints if c.terms]
        return f"removed references to {name}"
    if code == "NONCONVEX_TERM":
        for t in ir.objective:
            if t.kind in ("quad", "abs") and t.coef < 0:
                t.coef = abs(t.coef)
        return "replaced negative curvature coefficients by their magnitude"
    if code in ("UNBOUNDED_VAR", "CONTRADICTORY_BOUNDS"):
        name = issue.message.split(":")[0].split(" ")[0]
        v = ir.var(name)
        cat = _catalog(ir, name)
        if cat is not None and (cat["lb"] is None or cat["ub"] is None or cat["lb"] <= cat["ub"]):
            v.lb, v.ub = cat["lb"], cat["ub"]
            v.ub_ref, v.ub_scale = cat.get("ub_ref"), cat.get("ub_scale", 1.0)
            if not v.bounded:
                v.lb = -DEFAULT_BOX if v.lb is None else v.lb
                v.ub = DEFAULT_BOX if (v.ub is None and v.ub_ref is None) else v.ub
            return f"restored catalog bounds for {name}"
        if code == "CONTRADICTORY_BOUNDS":
            v.lb, v.ub = v.ub, v.lb
            return f"swapped bounds of {name}"
        v.lb = -DEFAULT_BOX if v.lb is None else v.lb
        if v.ub is None and v.ub_ref is None:
            v.ub = DEFAULT_BOX
        return f"boxed {name} to +/-{DEFAULT_BOX:g}"
    if code == "DATA_DIMENSION":
        shortest = min(len(data[r]) for r in ir.data_refs if r in data and np.ndim(data[r]) > 0)
        old = ir.horizon
        ir.horizon = shortest
        return f"truncated horizon {old} -> {shortest}"
    if code == "INFEASIBLE" and not ir.meta.get("relaxed"):
        if _relax_soc(ir):
            ir.meta["relaxed"] = True
            return f"relaxed SOC dynamics with penalised slack ({SLACK_PENALTY:g} per unit)"
    return ""


def _relax_soc(ir: ModelIR) -> bool:
    targets = [c for c in ir.constraints if c.name.startswith("bess_soc")]
    if not targets or not ir.has_var("soc"):
        return False
    ir.variables += [Variable("soc_slack_up", 0.0, 1.0), Variable("soc_slack_dn", 0.0, 1.0)]
    for name in ("soc_slack_up", "soc_slack_dn"):
        ir.meta.setdefault("catalog", {})[name] = {"lb": 0.0, "ub": 1.0, "ub_ref": None, "ub_scale": 1.0}
    for c in targets:
        c.terms += [LinTerm("soc_slack_up", 1.0), LinTerm("soc_slack_dn", -1.0)]
    ir.objective += [Term("lin", "soc_slack_up", SLACK_PENALTY), Term("lin", "soc_slack_dn", SLACK_PENALTY)]
    return True


def validate_and_correct(ir: ModelIR, data: dict, max_corrections: int = MAX_CORRECTIONS):
    """Check, trial-solve and repair ``ir`` for at most ``max_corrections`` rounds.

    Returns the (possibly repaired) copy and a CorrectionReport; the report's
    ``passed`` flag is False when issues remain after the last round.
    """
    ir = ir.copy()
    report = CorrectionReport()
    for it in range(max_corrections + 1):
        issues = diagnose(ir, data)
        if not issues:
            try:
                solve_convex(ir, data)
            except SolverError as exc:
                issues = [Issue("INFEASIBLE", f"trial solve failed: {exc} ({exc.status})")]
            except DataError as exc:
                issues = [Issue("RUNTIME_ERROR", f"trial solve failed: {exc}")]
        if not issues:
            report.passed = True
            report.iterations = it
            return ir, report
        if it == max_corrections:
            report.issues.extend(issues)
            report.iterations = it
            break
        progress = False
        for issue in issues:
            # a fix may already have resolved later issues of the same round
            issue.fix_applied = _fix(ir, issue, data)
            progress |= bool(issue.fix_applied)
            report.issues.append(issue)
        report.iterations = it + 1
        if not progress:
            break
    report.passed = False
    return ir, report
