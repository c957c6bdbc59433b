"""TOML trial configuration.

Every section is optional; missing keys take the dataclass defaults::

    seed = 1

    [layout]            # preset name plus overrides, or explicit rows
    preset = "CRT"
    n_lanes = 4
    spacing = 2.7
    # length = 120.0
    # slope_deg = 10.0
    # rows = [[[e0, n0], [e1, n1]], ...]

    [plan]              # serpentine over `lanes` unless entries/exits are given
    lanes = [0, 1, 2, 3]
    first_direction = 1
    end_threshold = 12.0

    [noise]             # NoiseSpec fields
    [gains]             # ControllerGains fields
    [navigator]         # NavigatorConfig fields
    [trial]             # TrialSettings fields

    [[script]]          # zero or more ScriptEvent entries
    kind = "noise_boost"
    t0 = 30.0
    t1 = 40.0
    factor = 3.0
"""
from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .control import ControllerGains
from .navigator import MissionPlan, NavigatorConfig
from .simulator import ScriptEvent, TrialSettings
from .world import NoiseSpec, VineyardLayout


def load_toml(path) -> dict:
    with open(path, "rb") as f:
        return tomllib.load(f)


def _build(cls, section: dict, name: str):
    known = {f.name for f in fields(cls) if f.init}
    extra = set(section) - known
    if extra:
        raise ValueError(f"[{name}] unknown keys: {sorted(extra)}")
    kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in section.items()}
    return cls(**kw)


def layout_from_dict(d: dict) -> VineyardLayout:
    d = dict(d)
    if "rows" in d:
        return VineyardLayout(tuple((tuple(a), tuple(b)) for a, b in d["rows"]), float(d["spacing"]),
                              slope=math.radians(d.get("slope_deg", 0.0)),
                              slope_azimuth=math.radians(d.get("slope_azimuth_deg", 0.0)),
                              name=d.get("name", "custom"))
    preset = d.pop("preset", "CRT")
    allowed = {"n_lanes", "spacing", "length", "slope_deg"}
    extra = set(d) - allowed
    if extra:
        raise ValueError(f"[layout] unknown keys: {sorted(extra)}")
    return VineyardLayout.preset(preset, **d)


def plan_from_dict(d: dict, layout: VineyardLayout) -> MissionPlan:
    if "entries" in d:
        return MissionPlan.from_dict({"row_spacing": layout.row_spacing, **d})
    return MissionPlan.serpentine(layout, d.get("lanes"), int(d.get("first_direction", 1)),
                                  float(d.get("end_threshold", 12.0)))


@dataclass
class TrialConfig:
    layout: VineyardLayout
    plan: MissionPlan
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    gains: ControllerGains = field(default_factory=ControllerGains)
    navigator: NavigatorConfig = field(default_factory=NavigatorConfig)
    settings: TrialSettings = field(default_factory=TrialSettings)
    script: tuple = ()
    seed: Optional[int] = None
    text: str = ""

    @classmethod
    def from_dict(cls, d: dict, text: str = "") -> "TrialConfig":
        top = {"seed", "layout", "plan", "noise", "gains", "navigator", "trial", "script"}
        extra = set(d) - top
        if extra:
            raise ValueError(f"unknown config sections: {sorted(extra)}")
        layout = layout_from_dict(d.get("layout", {}))
        plan = plan_from_dict(d.get("plan", {}), layout)
        script = []
        for s in d.get("script", []):
            s = dict(s)
            if "center" in s:
                s["center"] = tuple(s["center"])
            script.append(ScriptEvent(**s))
        return cls(layout, plan,
                   _build(NoiseSpec, d.get("noise", {}), "noise"),
                   _build(ControllerGains, d.get("gains", {}), "gains"),
                   _build(NavigatorConfig, d.get("navigator", {}), "navigator"),
                   _build(TrialSettings, d.get("trial", {}), "trial"),
                   tuple(script), d.get("seed"), text)

    @classmethod
    def load(cls, path) -> "TrialConfig":
        p = Path(path)
        text = p.read_text()
        return cls.from_dict(tomllib.loads(text), text)

    @classmethod
    def preset(cls, name: str = "CRT", seed: Optional[int] = None) -> "TrialConfig":
        text = f'[layout]\npreset = "{name}"\n'
        if seed is not None:
            text = f"seed = {seed}\n" + text
        return cls.from_dict(tomllib.loads(text), text)
