"""Declarative convex-program representation produced by the model generator.

A model spans ``horizon`` steps; every variable is a length-``horizon``
vector. Constraint families are instantiated once per step, and a term with
``shift=-1`` refers to the previous step; before the first step the
scalar data entry ``init.<var>`` stands in for it.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field

SENSES = ("eq", "le", "ge")
TERM_KINDS = ("quad", "lin", "abs")


@dataclass
class Variable:
    name: str
    lb: float | None = None
    ub: float | None = None
    ub_ref: str | None = None  # per-step upper bound = ub_scale * data[ub_ref][t]
    ub_scale: float = 1.0

    @property
    def bounded(self) -> bool:
        return self.lb is not None and (self.ub is not None or self.ub_ref is not None)


@dataclass
class Term:
    """Objective term ``coef * f(var[t])`` summed over steps (or at one step)."""

    kind: str
    var: str
    coef: float
    coef_ref: str | None = None  # multiply by data[coef_ref] (scalar or per step)
    at: int | None = None  # restrict to a single step; negative counts from the end


@dataclass
class LinTerm:
    var: str
    coef: float
    shift: int = 0


@dataclass
class Constraint:
    name: str
    sense: str
    terms: list[LinTerm]
    rhs: float = 0.0
    rhs_ref: str | None = None
    rhs_scale: float = 1.0


@dataclass
class ModelIR:
    horizon: int
    variables: list[Variable] = field(default_factory=list)
    objective: list[Term] = field(default_factory=list)
    constraints: list[Constraint] = field(default_factory=list)
    data_refs: list[str] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def var(self, name: str) -> Variable:
        for v in self.variables:
            if v.name == name:
                return v
        raise KeyError(name)

    def has_var(self, name: str) -> bool:
        return any(v.name == name for v in self.variables)

    @property
    def var_names(self) -> list[str]:
        return [v.name for v in self.variables]

    def referenced_vars(self) -> set[str]:
        names = {t.var for t in self.objective}
        for c in self.constraints:
            names.update(t.var for t in c.terms)
        return names

    def copy(self) -> "ModelIR":
        return copy.deepcopy(self)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelIR":
        return cls(
            horizon=int(d["horizon"]),
            variables=[Variable(**v) for v in d.get("variables", [])],
            objective=[Term(**t) for t in d.get("objective", [])],
            constraints=[
                Constraint(
                    name=c["name"],
                    sense=c["sense"],
                    terms=[LinTerm(**t) for t in c["terms"]],
                    rhs=c.get("rhs", 0.0),
                    rhs_ref=c.get("rhs_ref"),
                    rhs_scale=c.get("rhs_scale", 1.0),
                )
                for c in d.get("constraints", [])
            ],
            data_refs=list(d.get("data_refs", [])),
            meta=dict(d.get("meta", {})),
        )

    def to_json(self) -> str:
        """Canonical serialisation: sorted keys, fixed separators."""
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, s: str) -> "ModelIR":
        return cls.from_dict(json.loads(s))
