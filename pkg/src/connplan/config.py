"""Mission configuration files.

Flat ``section.key = value`` lines; ``#`` starts a comment.  Robots are
given as repeated blocks, each opened by a ``robot.id`` line::

    connectivity.delta = 40
    planner.eta = 2

    robot.id = p1
    robot.role = primary
    robot.init = -4, 0
    robot.desired = -30, 0 ; 10, 10     # one position per segment

Unknown keys, duplicate keys and malformed values are rejected with the
offending line number.
"""

from __future__ import annotations

from dataclasses import fields, replace
from importlib import resources
from pathlib import Path

from .admm import AdmmParams
from .errors import ConfigError, DomainError
from .sim import MissionSpec, RobotSpec

PRESET_PACKAGE = "connplan.presets"


def _floats(text: str, n: int | None = None) -> tuple:
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise ValueError(f"expected comma-separated numbers, got {text!r}") from None
    if n is not None and len(vals) != n:
        raise ValueError(f"expected {n} numbers, got {len(vals)}")
    return vals


def _int(text: str) -> int:
    return int(text)


def _float(text: str) -> float:
    return float(text)


def _str(text: str) -> str:
    if not text:
        raise ValueError("empty value")
    return text


def _desired(text: str) -> tuple:
    return tuple(_floats(seg, 2) for seg in text.split(";"))


# key -> (target, field name, parser); target is "mission" or "admm"
_KEYS = {
    "mission.name": ("mission", "name", _str),
    "mission.mode": ("mission", "mode", _str),
    "dynamics.dt": ("mission", "dt", _float),
    "dynamics.horizon": ("mission", "horizon", _int),
    "dynamics.process_intensity": ("mission", "process_intensity", _float),
    "dynamics.meas_var": ("mission", "meas_var", _float),
    "dynamics.max_accel": ("mission", "u_max", _float),
    "dynamics.sigma_init": ("mission", "sigma_init", lambda s: _floats(s, 4)),
    "weights.wx_primary": ("mission", "wx_primary", lambda s: _floats(s, 4)),
    "weights.wx_bridge": ("mission", "wx_bridge", lambda s: _floats(s, 4)),
    "weights.wu": ("mission", "wu", _float),
    "tracking.wx": ("mission", "tracking_wx", lambda s: _floats(s, 4)),
    "tracking.wu": ("mission", "tracking_wu", _float),
    "connectivity.delta": ("mission", "delta", _float),
    "connectivity.delta0": ("mission", "delta0", _float),
    "connectivity.epsilon": ("mission", "epsilon", _float),
    "connectivity.delta_conf": ("mission", "delta_conf", _float),
    "connectivity.k_c": ("mission", "k_c", _float),
    "planner.rho": ("admm", "rho", _float),
    "planner.eta": ("admm", "eta", _int),
    "planner.gamma": ("admm", "gamma", _float),
    "planner.ilqg_iterations": ("admm", "ilqg_budget", _int),
    "planner.max_iterations": ("admm", "max_iterations", _int),
    "planner.stop": ("admm", "stop", _str),
    "planner.time_budget_s": ("admm", "time_budget_s", _float),
    "planner.comm_delay_s": ("admm", "comm_delay_s", _float),
    "planner.clock": ("admm", "clock", _str),
    "planner.model_eval_s": ("admm", "model_eval_s", _float),
    "validation.rollouts": ("mission", "rollouts", _int),
    "validation.seed": ("mission", "seed", _int),
}
_ROBOT_KEYS = {"robot.id": _str, "robot.role": _str, "robot.init": lambda s: _floats(s, 2),
               "robot.desired": _desired}


def parse_config(text: str, source: str = "<config>") -> MissionSpec:
    mission_kw, admm_kw = {}, {}
    robots: list = []
    robot_lines: list = []
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key in _ROBOT_KEYS:
            try:
                parsed = _ROBOT_KEYS[key](value)
            except ValueError as exc:
                raise ConfigError(f"{source}:{lineno}: {key}: {exc}") from None
            if key == "robot.id":
                current = {"id": parsed}
                robots.append(current)
                robot_lines.append(lineno)
                continue
            if current is None:
                raise ConfigError(f"{source}:{lineno}: {key} before any robot.id line")
            field_name = key.split(".", 1)[1]
            if field_name in current:
                raise ConfigError(f"{source}:{lineno}: duplicate {key} for robot {current['id']}")
            current[field_name] = parsed
            continue
        if key not in _KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        target, name, parser = _KEYS[key]
        bucket = mission_kw if target == "mission" else admm_kw
        if name in bucket:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            bucket[name] = parser(value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: {key}: {exc}") from None

    specs = []
    for rb, lineno in zip(robots, robot_lines):
        missing = {"role", "init"} - rb.keys()
        if missing:
            raise ConfigError(f"{source}:{lineno}: robot {rb['id']} is missing {sorted(missing)}")
        try:
            specs.append(RobotSpec(rb["id"], rb["role"], rb["init"], rb.get("desired", ())))
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    try:
        admm = AdmmParams(**admm_kw)
        return MissionSpec(tuple(specs), admm=admm, **mission_kw)
    except (ConfigError, DomainError) as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path) -> MissionSpec:
    """Read a config file, or a bundled preset given by bare name (e.g. ``offline_desk``)."""
    p = Path(path)
    if p.is_file():
        return parse_config(p.read_text(), str(p))
    name = str(path)
    preset = resources.files(PRESET_PACKAGE).joinpath(f"{name}.cfg")
    if "/" not in name and preset.is_file():
        return parse_config(preset.read_text(), f"preset:{name}")
    raise FileNotFoundError(f"config {path!r} not found")


def preset_names() -> list:
    return sorted(p.name[:-4] for p in resources.files(PRESET_PACKAGE).iterdir() if p.name.endswith(".cfg"))


def with_overrides(mission: MissionSpec, **admm_overrides) -> MissionSpec:
    admm_overrides = {k: v for k, v in admm_overrides.items() if v is not None}
    valid = {f.name for f in fields(AdmmParams)}
    bad = set(admm_overrides) - valid
    if bad:
        raise ConfigError(f"unknown planner overrides {sorted(bad)}")
    return replace(mission, admm=replace(mission.admm, **admm_overrides))
