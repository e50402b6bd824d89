"""Scenario definition: intersection, vehicle, controller and run parameters.

A scenario file is TOML with top-level physical keys plus optional
``[demand]``, ``[controller]`` and ``[sim]`` tables.  Key names carry their
unit as a suffix (``x_zone_m``, ``v_max_mps``, ...); unknown keys are
rejected rather than ignored so typos cannot silently fall back to defaults.
The nine standard cases (three control schemes crossed with three demand
profiles) are available as presets.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace

try:
    import tomllib  # py311+
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as tomllib

from .dynamics import VehicleParams

__all__ = [
    "Scenario",
    "ScenarioError",
    "DEMAND_PROFILES",
    "load_scenario",
    "parse_scenario",
    "preset",
    "apply_overrides",
    "scenario_hash",
    "scenario_toml",
]


class ScenarioError(ValueError):
    """Malformed scenario input: unknown key, bad type, or invalid value."""


DEMAND_PROFILES = {
    "I": (800.0,) * 8,
    "II": (1000.0,) * 8,
    "III": (900.0, 1500.0, 400.0, 400.0, 900.0, 1500.0, 400.0, 400.0),
}

# case id -> (controller, demand profile, cycle length)
_PRESETS = {
    1: ("coordinated", "I", None),
    2: ("fixed_cycle", "I", 54.0),
    3: ("fixed_cycle", "I", 60.0),
    4: ("coordinated", "II", None),
    5: ("fixed_cycle", "II", 54.0),
    6: ("fixed_cycle", "II", 60.0),
    7: ("coordinated", "III", None),
    8: ("fixed_cycle", "III", 54.0),
    9: ("fixed_cycle", "III", 60.0),
}


@dataclass(frozen=True)
class Scenario:
    """One fully specified run; defaults are the standard parameter set."""

    x_zone_m: float = 200.0
    v_max_mps: float = 14.0
    v_min_mps: float = 0.0
    v_desired_mps: float = 12.27
    u_min_mps2: float = -2.0
    u_max_mps2: float = 2.0
    t_s_s: float = 2.0
    h_m: float = 3.0
    t_clr_s: float = 2.0
    g_max_s: float = 25.0
    g_min_s: float = 6.0
    q_u: float = 2.5
    q_v: float = 0.0153
    m_kg: float = 1487.0
    a_f_m2: float = 2.3
    c_d: float = 0.3
    rho_kgpm3: float = 1.226
    c_r: float = 1.75
    c1: float = 0.0328
    c2: float = 4.575
    eta: float = 0.92
    alpha0: float = 4.89e-4
    alpha1: float = 4.29e-5
    alpha2: float = 1e-6
    theta_rad: float = 0.0
    demand: tuple[float, ...] = (0.0,) * 8  # veh/h/lane for movements 1..8
    controller: str = "coordinated"
    cycle_length_s: float | None = None  # fixed_cycle only
    duration_s: float = 600.0
    seed: int = 0
    score_window: str = "stopline"  # stop at the line, or "zone" for full traversal
    score_range_m: float | None = None  # score only the last such stretch before the line

    def __post_init__(self) -> None:
        if not self.v_min_mps <= self.v_desired_mps <= self.v_max_mps:
            raise ScenarioError("v_desired_mps must lie within the speed bounds")
        if self.u_min_mps2 >= 0 or self.u_max_mps2 <= 0:
            raise ScenarioError("acceleration bounds must straddle zero")
        for name in ("x_zone_m", "t_s_s", "h_m", "m_kg", "a_f_m2", "eta", "duration_s"):
            if getattr(self, name) <= 0:
                raise ScenarioError(f"{name} must be positive")
        if self.t_clr_s < 0:
            raise ScenarioError("t_clr_s must be nonnegative")
        if not 0 < self.g_min_s <= self.g_max_s:
            raise ScenarioError("need 0 < g_min_s <= g_max_s")
        if self.q_u < 0 or self.q_v < 0:
            raise ScenarioError("objective weights must be nonnegative")
        if len(self.demand) != 8 or any(d < 0 for d in self.demand):
            raise ScenarioError("demand needs 8 nonnegative rates (movements 1..8)")
        if self.controller not in ("coordinated", "fixed_cycle"):
            raise ScenarioError(f"unknown controller {self.controller!r}")
        if self.controller == "fixed_cycle":
            if self.cycle_length_s is None or self.cycle_length_s <= 0:
                raise ScenarioError("fixed_cycle needs a positive cycle_length_s")
        elif self.cycle_length_s is not None:
            raise ScenarioError("cycle_length_s only applies to the fixed_cycle controller")
        if self.seed < 0:
            raise ScenarioError("seed must be a nonnegative integer")
        if self.score_window not in ("stopline", "zone"):
            raise ScenarioError(f"unknown score_window {self.score_window!r}")
        if self.score_range_m is not None and not 0 < self.score_range_m <= self.x_zone_m:
            raise ScenarioError("score_range_m must lie in (0, x_zone_m]")

    def vehicle_params(self) -> VehicleParams:
        return VehicleParams(
            v_min=self.v_min_mps,
            v_max=self.v_max_mps,
            u_min=self.u_min_mps2,
            u_max=self.u_max_mps2,
            v_desired=self.v_desired_mps,
            headway=self.h_m,
        )

    @property
    def demand_by_movement(self) -> dict[int, float]:
        return {j + 1: self.demand[j] for j in range(8)}


_PHYSICAL_KEYS = (
    "x_zone_m", "v_max_mps", "v_min_mps", "v_desired_mps", "u_min_mps2",
    "u_max_mps2", "t_s_s", "h_m", "t_clr_s", "g_max_s", "g_min_s", "q_u",
    "q_v", "m_kg", "a_f_m2", "c_d", "rho_kgpm3", "c_r", "c1", "c2", "eta",
    "alpha0", "alpha1", "alpha2", "theta_rad",
)
_CONTROLLER_KEYS = ("type", "cycle_length_s")
_SIM_KEYS = ("duration_s", "seed", "score_window", "score_range_m")


def _number(table: str, key: str, value) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ScenarioError(f"{table}{key} must be a number, got {value!r}")
    return float(value)


def parse_scenario(text: str) -> Scenario:
    """Build a scenario from TOML text; every key unknown to the format errors."""
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ScenarioError(f"not valid TOML: {exc}") from exc

    kwargs: dict = {}
    for key, value in doc.items():
        if key in _PHYSICAL_KEYS:
            kwargs[key] = _number("", key, value)
        elif key in ("demand", "controller", "sim"):
            if not isinstance(value, dict):
                raise ScenarioError(f"[{key}] must be a table")
        else:
            raise ScenarioError(f"unknown key {key!r}")

    demand = list(Scenario.__dataclass_fields__["demand"].default)
    for key, value in doc.get("demand", {}).items():
        if not key.startswith("movement_"):
            raise ScenarioError(f"unknown key demand.{key!r}")
        try:
            j = int(key[len("movement_"):])
        except ValueError:
            j = 0
        if not 1 <= j <= 8:
            raise ScenarioError(f"unknown key demand.{key!r}")
        demand[j - 1] = _number("demand.", key, value)
    if "demand" in doc:
        kwargs["demand"] = tuple(demand)

    ctrl = doc.get("controller", {})
    for key in ctrl:
        if key not in _CONTROLLER_KEYS:
            raise ScenarioError(f"unknown key controller.{key!r}")
    if "type" in ctrl:
        if not isinstance(ctrl["type"], str):
            raise ScenarioError("controller.type must be a string")
        kwargs["controller"] = ctrl["type"]
    if "cycle_length_s" in ctrl:
        kwargs["cycle_length_s"] = _number("controller.", "cycle_length_s", ctrl["cycle_length_s"])

    sim = doc.get("sim", {})
    for key in sim:
        if key not in _SIM_KEYS:
            raise ScenarioError(f"unknown key sim.{key!r}")
    if "duration_s" in sim:
        kwargs["duration_s"] = _number("sim.", "duration_s", sim["duration_s"])
    if "seed" in sim:
        if isinstance(sim["seed"], bool) or not isinstance(sim["seed"], int):
            raise ScenarioError("sim.seed must be an integer")
        kwargs["seed"] = sim["seed"]
    if "score_window" in sim:
        if not isinstance(sim["score_window"], str):
            raise ScenarioError("sim.score_window must be a string")
        kwargs["score_window"] = sim["score_window"]
    if "score_range_m" in sim:
        kwargs["score_range_m"] = _number("sim.", "score_range_m", sim["score_range_m"])

    return Scenario(**kwargs)


def load_scenario(path) -> Scenario:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_scenario(fh.read())


def preset(case: int, seed: int = 0, duration_s: float = 600.0) -> Scenario:
    """One of the nine standard cases: controller scheme x demand profile."""
    if case not in _PRESETS:
        raise ScenarioError(f"preset must be 1..9, got {case}")
    controller, profile, cycle = _PRESETS[case]
    return Scenario(
        demand=DEMAND_PROFILES[profile],
        controller=controller,
        cycle_length_s=cycle,
        duration_s=duration_s,
        seed=seed,
    )


def _alias_map() -> dict[str, str]:
    names = {f.name: f.name for f in fields(Scenario)}
    for f in fields(Scenario):
        for suffix in ("_mps2", "_mps", "_kgpm3", "_kg", "_m2", "_rad", "_m", "_s"):
            if f.name.endswith(suffix):
                short = f.name[: -len(suffix)]
                # drop ambiguous shortenings instead of guessing
                if short and short not in names:
                    names.setdefault(short, f.name)
                break
    names["type"] = "controller"  # controller.type in file syntax
    return names


_ALIASES = _alias_map()


def apply_overrides(sc: Scenario, overrides: dict[str, str]) -> Scenario:
    """Apply ``key=value`` string overrides; keys may drop their unit suffix.

    ``demand.movement_3=500`` addresses one movement; plain scenario fields
    accept either the full name (``g_min_s``) or the suffix-free alias
    (``g_min``).  Values are parsed with TOML scalar rules.
    """
    changes: dict = {}
    demand = list(sc.demand)
    for raw_key, raw_value in overrides.items():
        key = raw_key.strip()
        if raw_value.strip().lower() in ("none", ""):
            value = None
        else:
            try:
                value = tomllib.loads(f"v = {raw_value}")["v"]
            except tomllib.TOMLDecodeError:
                value = raw_value  # bare strings (e.g. controller names)
        if key.startswith("demand.movement_"):
            j = key[len("demand.movement_"):]
            if not j.isdigit() or not 1 <= int(j) <= 8:
                raise ScenarioError(f"unknown override key {raw_key!r}")
            demand[int(j) - 1] = _number("demand.", key, value)
            changes["demand"] = tuple(demand)
            continue
        name = _ALIASES.get(key.removeprefix("controller.").removeprefix("sim."))
        if name is None or name == "demand":
            raise ScenarioError(f"unknown override key {raw_key!r}")
        if name == "seed":
            if not isinstance(value, int) or isinstance(value, bool):
                raise ScenarioError("seed must be an integer")
        elif name in ("controller", "score_window"):
            if not isinstance(value, str):
                raise ScenarioError(f"{name} must be a string")
        elif name in ("cycle_length_s", "score_range_m") and value is None:
            pass
        else:
            value = _number("", name, value)
        changes[name] = value
    return replace(sc, **changes)  # validated once, so paired edits work


def scenario_hash(sc: Scenario) -> str:
    """Digest of every field except the seed, so reruns across seeds match."""
    parts = []
    for f in sorted(fields(Scenario), key=lambda f: f.name):
        if f.name == "seed":
            continue
        parts.append(f"{f.name}={getattr(sc, f.name)!r}")
    return hashlib.sha256("\n".join(parts).encode()).hexdigest()


def scenario_toml(sc: Scenario) -> str:
    """Render the scenario back to TOML (round-trips through parse_scenario)."""
    lines = [f"{k} = {getattr(sc, k)!r}" for k in _PHYSICAL_KEYS]
    lines.append("")
    lines.append("[demand]")
    lines += [f"movement_{j + 1} = {sc.demand[j]!r}" for j in range(8)]
    lines.append("")
    lines.append("[controller]")
    lines.append(f'type = "{sc.controller}"')
    if sc.cycle_length_s is not None:
        lines.append(f"cycle_length_s = {sc.cycle_length_s!r}")
    lines.append("")
    lines.append("[sim]")
    lines.append(f"duration_s = {sc.duration_s!r}")
    lines.append(f"seed = {sc.seed}")
    lines.append(f'score_window = "{sc.score_window}"')
    if sc.score_range_m is not None:
        lines.append(f"score_range_m = {sc.score_range_m!r}")
    return "\n".join(lines) + "\n"
