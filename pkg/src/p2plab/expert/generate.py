"""Model generation: ProsumerSpec -> ModelIR through a pluggable backend."""

from __future__ import annotations

import json
import logging
import math
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path

from ..errors import ConfigError, DataError, P2PLabError
from ..prosumer import STEP_HOURS, ProsumerSpec
from .ir import Constraint, LinTerm, ModelIR, Term, Variable

log = logging.getLogger(__name__)

# 32-gon inscribed in the apparent-power circle; only facets facing p >= 0 matter
POLY_SIDES = 32
DEFAULT_HORIZON = 8
# small curvature on otherwise cost-free or linear-cost setpoints so the
# optimum is unique among schedules of equal operating cost
TIE_BREAK = 1e-3


@dataclass
class GeneratorBackend:
    kind: str = "deterministic"  # deterministic | fixture | external
    parameters: dict = field(default_factory=dict)


def _apparent_power_facets(s_max: float) -> list[tuple[float, float, float]]:
    half = math.pi / POLY_SIDES
    offset = s_max * math.cos(half)
    facets = []
    n = POLY_SIDES // 2
    for k in range(n + 1):
        phi = -math.pi / 2 + 2 * half * k
        facets.append((math.cos(phi), math.sin(phi), offset))
    return facets


def template_model(spec: ProsumerSpec, horizon: int = DEFAULT_HORIZON) -> ModelIR:
    """Template expansion keyed on the devices the prosumer owns."""
    ir = ModelIR(horizon=horizon)
    catalog: dict[str, dict] = {}
    action_map: dict[str, list] = {}

    def declare(var: Variable):
        ir.variables.append(var)
        catalog[var.name] = {"lb": var.lb, "ub": var.ub, "ub_ref": var.ub_ref, "ub_scale": var.ub_scale}

    refs: list[str] = []
    if spec.cdg is not None:
        c = spec.cdg
        declare(Variable("p_cdg", c.p_min, c.p_max))
        ir.constraints.append(Constraint("cdg_ramp_up", "le",
                                         [LinTerm("p_cdg", 1.0), LinTerm("p_cdg", -1.0, -1)], c.ramp_max))
        ir.constraints.append(Constraint("cdg_ramp_down", "ge",
                                         [LinTerm("p_cdg", 1.0), LinTerm("p_cdg", -1.0, -1)], -c.ramp_max))
        ir.objective.append(Term("quad", "p_cdg", c.cost_quad))
        ir.objective.append(Term("lin", "p_cdg", c.cost_lin))
        action_map["p_cdg"] = [["p_cdg", 1.0]]
        refs.append("init.p_cdg")
    if spec.rdg is not None:
        r = spec.rdg
        declare(Variable("p_rdg", 0.0, r.s_max, ub_ref="rdg_avail"))
        declare(Variable("q_rdg", -r.s_max, r.s_max))
        for k, (a, b, off) in enumerate(_apparent_power_facets(r.s_max)):
            ir.constraints.append(Constraint(f"rdg_apparent_{k}", "le",
                                             [LinTerm("p_rdg", a), LinTerm("q_rdg", b)], off))
        ir.objective.append(Term("quad", "q_rdg", TIE_BREAK))
        action_map["p_rdg"] = [["p_rdg", 1.0]]
        action_map["q_rdg"] = [["q_rdg", 1.0]]
        refs.append("rdg_avail")
    if spec.bess is not None:
        b = spec.bess
        dt = b.dt_norm
        declare(Variable("p_ch", 0.0, max(b.p_max, 0.0)))
        declare(Variable("p_dis", 0.0, max(-b.p_min, 0.0)))
        declare(Variable("soc", b.soc_min, b.soc_max))
        ir.constraints.append(Constraint(
            "bess_soc", "eq",
            [LinTerm("soc", 1.0), LinTerm("soc", -1.0, -1),
             LinTerm("p_ch", -b.eta * dt), LinTerm("p_dis", dt / b.eta)],
            0.0,
        ))
        ir.objective.append(Term("lin", "p_ch", b.maint_coeff))
        ir.objective.append(Term("lin", "p_dis", b.maint_coeff))
        ir.objective.append(Term("quad", "p_ch", TIE_BREAK))
        ir.objective.append(Term("quad", "p_dis", TIE_BREAK))
        ir.objective.append(Term("lin", "soc", -1.0, coef_ref="soc_value", at=-1))
        action_map["p_bess"] = [["p_ch", 1.0], ["p_dis", -1.0]]
        refs += ["init.soc", "soc_value"]
    if spec.cl is not None:
        declare(Variable("p_cl", 0.0, None, ub_ref="load_p", ub_scale=spec.cl.alpha))
        ir.objective.append(Term("lin", "p_cl", spec.cl.comp_coeff))
        action_map["p_cl"] = [["p_cl", 1.0]]
        refs.append("load_p")
    ir.data_refs = sorted(set(refs))
    ir.meta = {
        "agent": spec.agent_id,
        "scenario_tag": spec.scenario_tag,
        "backend": "deterministic",
        "catalog": catalog,
        "action_map": action_map,
        "integrated": False,
        "relaxed": False,
        "step_hours": STEP_HOURS,
    }
    return ir


class FixtureStore:
    """Recorded generator responses keyed by agent id or scenario tag."""

    def __init__(self, records: dict[str, dict]):
        self.records = records

    @classmethod
    def load(cls, path) -> "FixtureStore":
        return cls(json.loads(Path(path).read_text()))

    def lookup(self, spec: ProsumerSpec) -> ModelIR | None:
        rec = self.records.get(spec.agent_id) or self.records.get(spec.scenario_tag)
        return None if rec is None else ModelIR.from_dict(rec)


def _external_generate(spec: ProsumerSpec, horizon: int, params: dict) -> ModelIR:
    url = params.get("url")
    if not url:
        raise ConfigError("external backend requires a 'url' parameter")
    body = json.dumps({"prosumer": spec.to_dict(), "horizon": horizon}).encode()
    req = urllib.request.Request(url, data=body, headers={"Content-Type": "application/json"})
    with urllib.request.urlopen(req, timeout=float(params.get("timeout", 30))) as resp:
        return ModelIR.from_dict(json.loads(resp.read().decode()))


def generate_model(
    spec: ProsumerSpec, backend: GeneratorBackend | None = None, horizon: int = DEFAULT_HORIZON
) -> ModelIR:
    """Build the device model for one prosumer.

    Non-deterministic backends fall back to the template when
    ``parameters["fallback"]`` is true; otherwise their failures propagate.
    """
    if not any((spec.cdg, spec.rdg, spec.bess, spec.cl)):
        raise DataError("prosumer has no devices")
    backend = backend or GeneratorBackend()
    if backend.kind == "deterministic":
        return template_model(spec, horizon)
    fallback = bool(backend.parameters.get("fallback", False))
    try:
        if backend.kind == "fixture":
            store = backend.parameters.get("store")
            if store is None:
                store = FixtureStore.load(backend.parameters["path"])
            ir = store.lookup(spec)
            if ir is None:
                raise P2PLabError(f"no recorded model for {spec.agent_id}")
        elif backend.kind == "external":
            ir = _external_generate(spec, horizon, backend.parameters)
        else:
            raise ConfigError(f"unknown generator backend {backend.kind!r}")
    except (P2PLabError, OSError, urllib.error.URLError, ValueError, KeyError) as exc:
        if isinstance(exc, ConfigError) or not fallback:
            raise
        log.warning("%s backend failed for %s (%s); using template", backend.kind, spec.agent_id, exc)
        return template_model(spec, horizon)
    ir.meta.setdefault("backend", backend.kind)
    return ir
