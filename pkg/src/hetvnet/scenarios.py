"""Scenario files: parse, validate, and materialize a runnable world.

A scenario is one YAML document. The loader is strict: unknown keys,
missing requirements and out-of-range values all raise ConfigError with
the dotted path of the offending field, so a typo points at itself.

Randomness used while materializing (fleet desired speeds, flow jitter)
is drawn from the run's own seeded generator, in document order, before
the engine receives it. Identical (file, seed) therefore materializes an
identical world and the whole run stays reproducible.
"""

from __future__ import annotations

import copy
import math
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
import yaml

from .cloud import SensorChannel, SensorStream
from .core import (
    Intersection,
    LightPhase,
    MessageClass,
    PlatoonDescriptor,
    RoadNetwork,
    RoadSegment,
    Turn,
    VehicleKind,
    VehicleState,
)
from .engine import EngineParams, Script, SpawnEvent, VehicleRuntime, World
from .mobility import IdmParams
from .radio import LinkKind, LinkModel, SubbandConfig

SCHEMA_VERSION = 1
SCENARIO_KINDS = ("freeflow", "syncflow", "intersection")

# Free flow must stay strictly below the synchronized-flow regime, so a
# single boundary (vehicles per km) orders any valid pair of configs.
FREEFLOW_DENSITY_MAX = 15.0
SYNCFLOW_DENSITY_MIN = 15.0

_KIND_BY_NAME = {k.value: k for k in VehicleKind}
_ROUTE_BY_NAME = {c.value: c for c in MessageClass}


class ConfigError(ValueError):
    """Invalid scenario file; the message names the offending field."""


@dataclass
class ScenarioBundle:
    """Everything a run needs, ready to hand to the engine."""

    name: str
    kind: str
    seed: int
    world: World
    params: EngineParams
    rng: np.random.Generator


# --------------------------------------------------------------- primitives


def _fail(path: str, msg: str) -> None:
    raise ConfigError(f"{path}: {msg}")


def _section(cfg: dict, key: str, path: str, required: bool = False) -> dict:
    raw = cfg.pop(key, None)
    if raw is None:
        if required:
            _fail(f"{path}{key}", "section is required")
        return {}
    if not isinstance(raw, dict):
        _fail(f"{path}{key}", f"expected a mapping, got {type(raw).__name__}")
    return raw


def _no_leftovers(d: dict, path: str) -> None:
    if d:
        _fail(path, f"unknown key(s): {', '.join(sorted(map(str, d)))}")


def _num(d: dict, key: str, path: str, default=None, lo=None, hi=None,
         required: bool = False) -> Optional[float]:
    if key not in d:
        if required:
            _fail(f"{path}.{key}", "value is required")
        return default
    v = d.pop(key)
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        _fail(f"{path}.{key}", f"expected a number, got {v!r}")
    v = float(v)
    if lo is not None and v < lo:
        _fail(f"{path}.{key}", f"must be >= {lo}, got {v}")
    if hi is not None and v > hi:
        _fail(f"{path}.{key}", f"must be <= {hi}, got {v}")
    return v


def _int(d: dict, key: str, path: str, default=None, lo=None,
         required: bool = False) -> Optional[int]:
    v = _num(d, key, path, default=default, lo=lo, required=required)
    if v is None:
        return None
    if abs(v - round(v)) > 1e-9:
        _fail(f"{path}.{key}", f"expected an integer, got {v}")
    return int(round(v))


def _bool(d: dict, key: str, path: str, default=None,
          required: bool = False) -> Optional[bool]:
    if key not in d:
        if required:
            _fail(f"{path}.{key}", "value is required")
        return default
    v = d.pop(key)
    if not isinstance(v, bool):
        _fail(f"{path}.{key}", f"expected true/false, got {v!r}")
    return v


def _str(d: dict, key: str, path: str, default=None, choices=None,
         required: bool = False) -> Optional[str]:
    if key not in d:
        if required:
            _fail(f"{path}.{key}", "value is required")
        return default
    v = d.pop(key)
    if not isinstance(v, str):
        _fail(f"{path}.{key}", f"expected a string, got {v!r}")
    if choices is not None and v not in choices:
        _fail(f"{path}.{key}",
              f"must be one of {', '.join(choices)}; got {v!r}")
    return v


def _list(d: dict, key: str, path: str, default=()) -> list:
    if key not in d:
        return list(default)
    v = d.pop(key)
    if not isinstance(v, list):
        _fail(f"{path}.{key}", f"expected a list, got {type(v).__name__}")
    return v


# ------------------------------------------------------------------ loading


def load_config(path: str) -> dict:
    """Read one YAML scenario document; parse errors keep their line."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" \
            if mark is not None else ""
        raise ConfigError(f"{path}: not valid YAML{where}: {exc}") from exc
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror or exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return doc


def apply_overrides(cfg: dict, assignments: Dict[str, object]) -> dict:
    """Return a copy of cfg with dotted-path leaves replaced.

    Intermediate mappings are created when absent; every section is
    optional in the schema, so a sweep can touch a field the file left
    at its default.
    """
    out = copy.deepcopy(cfg)
    for dotted, value in assignments.items():
        node = out
        parts = dotted.split(".")
        for part in parts[:-1]:
            nxt = node.get(part)
            if nxt is None:
                nxt = node[part] = {}
            elif not isinstance(nxt, dict):
                raise ConfigError(
                    f"{dotted}: {part} is a value, not a section")
            node = nxt
        node[parts[-1]] = value
    return out


# ------------------------------------------------------------ sub-builders


def _build_radio(cfg: dict) -> SubbandConfig:
    sec = _section(cfg, "radio", "")
    widths = _list(sec, "subband_widths", "radio", default=(240, 360, 600))
    if len(widths) != 3 or not all(
            isinstance(w, int) and not isinstance(w, bool) for w in widths):
        _fail("radio.subband_widths", "expected three integers")
    loads = _list(sec, "loads", "radio", default=(4, 4, 64))
    if len(loads) != 3 or not all(
            isinstance(k, int) and not isinstance(k, bool) for k in loads):
        _fail("radio.loads", "expected three integers")
    kwargs = dict(
        widths=tuple(widths),
        loads=tuple(loads),
        delta_f=_num(sec, "subcarrier_hz", "radio", default=15_000.0, lo=1.0),
        codebook_size=_int(sec, "codebook_size", "radio", default=8, lo=1),
        slot=_num(sec, "slot_s", "radio", default=0.001, lo=1e-6),
        grant_rtt=_num(sec, "grant_rtt_s", "radio", default=0.010, lo=0.0),
        spectral_efficiency=_num(sec, "spectral_efficiency", "radio",
                                 default=1.0, lo=1e-9),
    )
    _no_leftovers(sec, "radio")
    try:
        return SubbandConfig(**kwargs)
    except ValueError as exc:
        # Ordering and positivity rules live on the type itself.
        raise ConfigError(f"radio.subband_widths: {exc}") from exc


def _build_links(cfg: dict) -> Dict[LinkKind, LinkModel]:
    sec = _section(cfg, "links", "")
    out = {}
    defaults = {LinkKind.V2V: 300.0, LinkKind.V2F: 500.0, LinkKind.V2B: 0.0}
    for kind in (LinkKind.V2V, LinkKind.V2F, LinkKind.V2B):
        key = kind.value
        sub = _section(sec, key, "links.")
        rng_m = _num(sub, "range_m", f"links.{key}", default=defaults[kind])
        per = _num(sub, "per", f"links.{key}", default=0.0, lo=0.0, hi=1.0)
        lat = _num(sub, "latency_s", f"links.{key}", default=0.0, lo=0.0)
        _no_leftovers(sub, f"links.{key}")
        try:
            out[kind] = LinkModel(kind, range=rng_m, base_per=per,
                                  base_latency=lat)
        except ValueError as exc:
            raise ConfigError(f"links.{key}: {exc}") from exc
    _no_leftovers(sec, "links")
    return out


def _build_idm(cfg: dict) -> IdmParams:
    sec = _section(cfg, "idm", "")
    kwargs = dict(
        a_max=_num(sec, "a_max", "idm", default=1.5, lo=1e-9),
        b_comfort=_num(sec, "b_comfort", "idm", default=2.0, lo=1e-9),
        s0=_num(sec, "s0_m", "idm", default=2.0, lo=1e-9),
        T_headway=_num(sec, "t_headway_s", "idm", default=1.5, lo=1e-9),
        delta=_num(sec, "delta", "idm", default=4.0, lo=1e-9),
    )
    _no_leftovers(sec, "idm")
    return IdmParams(**kwargs)


def _build_network(cfg: dict) -> RoadNetwork:
    sec = _section(cfg, "road", "", required=True)
    segments = []
    seg_items = _list(sec, "segments", "road")
    if not seg_items:
        _fail("road.segments", "at least one segment is required")
    for i, item in enumerate(seg_items):
        path = f"road.segments[{i}]"
        if not isinstance(item, dict):
            _fail(path, "expected a mapping")
        item = dict(item)
        try:
            segments.append(RoadSegment(
                id=_int(item, "id", path, required=True),
                length=_num(item, "length_m", path, required=True, lo=1.0),
                lane_count=_int(item, "lanes", path, required=True, lo=1),
                speed_limit=_num(item, "speed_limit_mps", path,
                                 required=True, lo=0.1),
                loop=_bool(item, "loop", path, default=False),
            ))
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"{path}: {exc}") from exc
        _no_leftovers(item, path)
    intersections = []
    for i, item in enumerate(_list(sec, "intersections", "road")):
        path = f"road.intersections[{i}]"
        if not isinstance(item, dict):
            _fail(path, "expected a mapping")
        item = dict(item)
        inter_id = _int(item, "id", path, required=True)
        incoming = _list(item, "incoming", path)
        if not incoming:
            _fail(f"{path}.incoming", "at least one incoming segment")
        turns = []
        for j, t in enumerate(_list(item, "turns", path)):
            tp = f"{path}.turns[{j}]"
            if not isinstance(t, dict):
                _fail(tp, "expected a mapping")
            t = dict(t)
            turns.append(Turn(
                source=_int(t, "from", tp, required=True),
                target=_int(t, "to", tp, required=True),
                direction=_str(t, "direction", tp, required=True,
                               choices=("left", "right", "straight")),
            ))
            _no_leftovers(t, tp)
        phases = []
        for j, ph in enumerate(_list(item, "lights", path)):
            pp = f"{path}.lights[{j}]"
            if not isinstance(ph, dict):
                _fail(pp, "expected a mapping")
            ph = dict(ph)
            green = _list(ph, "green_for", pp)
            phases.append(LightPhase(
                green_for=tuple(green),
                duration=_num(ph, "duration_s", pp, required=True, lo=0.1)))
            _no_leftovers(ph, pp)
        zone = _num(item, "zone_length_m", path, default=15.0, lo=1.0)
        _no_leftovers(item, path)
        try:
            intersections.append(Intersection(
                id=inter_id, incoming=tuple(incoming), turns=tuple(turns),
                light_cycle=tuple(phases), zone_length=zone))
        except ValueError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    _no_leftovers(sec, "road")
    try:
        return RoadNetwork(segments=tuple(segments),
                           intersections=tuple(intersections))
    except ValueError as exc:
        raise ConfigError(f"road: {exc}") from exc


def _desired_speed(spec, path: str, rng: np.random.Generator) -> float:
    """Scalar, or a [lo, hi] pair drawn uniformly per vehicle."""
    if isinstance(spec, (int, float)) and not isinstance(spec, bool):
        return float(spec)
    if isinstance(spec, list) and len(spec) == 2 and all(
            isinstance(x, (int, float)) and not isinstance(x, bool)
            for x in spec):
        lo, hi = float(spec[0]), float(spec[1])
        if not lo <= hi:
            _fail(path, f"range must satisfy lo <= hi, got {spec}")
        return float(rng.uniform(lo, hi))
    _fail(path, f"expected a number or [lo, hi], got {spec!r}")


def _vehicle_kind(d: dict, path: str, default: str = "Adv") -> VehicleKind:
    name = _str(d, "kind", path, default=default,
                choices=tuple(_KIND_BY_NAME))
    return _KIND_BY_NAME[name]


def _build_traffic(cfg: dict, net: RoadNetwork, kind: str,
                   rng: np.random.Generator
                   ) -> Tuple[Dict[int, VehicleRuntime],
                              Tuple[PlatoonDescriptor, ...],
                              Tuple[SpawnEvent, ...],
                              Tuple[Script, ...], dict]:
    sec = _section(cfg, "traffic", "", required=True)
    road_km = sum(s.length for s in net.segments) / 1000.0
    density = _num(sec, "density_veh_per_km", "traffic", lo=0.0)

    runtimes: Dict[int, VehicleRuntime] = {}

    def add_vehicle(vid: int, vkind: VehicleKind, state: VehicleState,
                    path: str) -> None:
        if vid in runtimes:
            _fail(path, f"duplicate vehicle id {vid}")
        runtimes[vid] = VehicleRuntime(vid=vid, kind=vkind, state=state)

    for i, item in enumerate(_list(sec, "vehicles", "traffic")):
        path = f"traffic.vehicles[{i}]"
        if not isinstance(item, dict):
            _fail(path, "expected a mapping")
        item = dict(item)
        vid = _int(item, "id", path, required=True, lo=0)
        vkind = _vehicle_kind(item, path)
        state = VehicleState(
            segment=_int(item, "segment", path, default=0),
            lane=_int(item, "lane", path, required=True, lo=0),
            s=_num(item, "s_m", path, required=True, lo=0.0),
            speed=_num(item, "speed_mps", path, required=True, lo=0.0),
            desired_speed=_num(item, "desired_mps", path, required=True,
                               lo=0.1),
            length=_num(item, "length_m", path, default=4.8, lo=0.5),
        )
        _no_leftovers(item, path)
        add_vehicle(vid, vkind, state, path)

    fleet = _section(sec, "fleet", "traffic.")
    if fleet:
        if density is None:
            _fail("traffic.density_veh_per_km",
                  "required when a fleet fills the census")
        target = int(round(density * road_km))
        count = target - len(runtimes)
        if count <= 0:
            _fail("traffic.fleet",
                  f"density {density} veh/km over {road_km:g} km asks for "
                  f"{target} vehicles but {len(runtimes)} are explicit")
        seg_id = _int(fleet, "segment", "traffic.fleet", default=0)
        seg = net.segment_by_id.get(seg_id)
        if seg is None:
            _fail("traffic.fleet.segment", f"unknown segment {seg_id}")
        ids_from = _int(fleet, "ids_from", "traffic.fleet", required=True,
                        lo=0)
        lanes = _list(fleet, "lanes", "traffic.fleet",
                      default=list(range(seg.lane_count)))
        if not lanes or not all(
                isinstance(l, int) and 0 <= l < seg.lane_count
                for l in lanes):
            _fail("traffic.fleet.lanes",
                  f"lane indices must lie in 0..{seg.lane_count - 1}")
        s_from = _num(fleet, "s_from_m", "traffic.fleet", default=0.0,
                      lo=0.0)
        if s_from >= seg.length:
            _fail("traffic.fleet.s_from_m",
                  f"must be below the segment length {seg.length:g}")
        speed = _num(fleet, "speed_mps", "traffic.fleet", required=True,
                     lo=0.0)
        desired_spec = fleet.pop("desired_mps", None)
        if desired_spec is None:
            _fail("traffic.fleet.desired_mps", "value is required")
        vkind = _vehicle_kind(fleet, "traffic.fleet")
        _no_leftovers(fleet, "traffic.fleet")

        per_lane = [count // len(lanes)] * len(lanes)
        for i in range(count % len(lanes)):
            per_lane[i] += 1
        slot_of: List[Tuple[int, int, int]] = []  # (lane, slot index, n)
        cursor = {l: 0 for l in lanes}
        for i in range(count):
            lane = lanes[i % len(lanes)]
            slot_of.append((lane, cursor[lane],
                            per_lane[lanes.index(lane)]))
            cursor[lane] += 1
        usable = seg.length - s_from
        for i, (lane, j, n) in enumerate(slot_of):
            vid = ids_from + i
            desired = _desired_speed(desired_spec,
                                     "traffic.fleet.desired_mps", rng)
            s = s_from + (j + 0.5) * usable / n
            state = VehicleState(segment=seg_id, lane=lane, s=s, speed=speed,
                                 desired_speed=desired)
            add_vehicle(vid, vkind, state, f"traffic.fleet (id {vid})")

    if density is not None:
        target = int(round(density * road_km))
        if len(runtimes) != target:
            _fail("traffic.density_veh_per_km",
                  f"declares {target} vehicles over {road_km:g} km but the "
                  f"census materializes {len(runtimes)}")
        if kind == "freeflow" and density >= FREEFLOW_DENSITY_MAX:
            _fail("traffic.density_veh_per_km",
                  f"free flow requires density < {FREEFLOW_DENSITY_MAX} "
                  f"veh/km, got {density}")
        if kind == "syncflow" and density < SYNCFLOW_DENSITY_MIN:
            _fail("traffic.density_veh_per_km",
                  f"synchronized flow requires density >= "
                  f"{SYNCFLOW_DENSITY_MIN} veh/km, got {density}")
    elif kind in ("freeflow", "syncflow"):
        _fail("traffic.density_veh_per_km",
              f"required for the {kind} scenario")

    platoons = []
    for i, item in enumerate(_list(sec, "platoons", "traffic")):
        path = f"traffic.platoons[{i}]"
        if not isinstance(item, dict):
            _fail(path, "expected a mapping")
        item = dict(item)
        head = _int(item, "head", path, required=True)
        followers = _list(item, "followers", path)
        _no_leftovers(item, path)
        for vid in [head] + followers:
            if vid not in runtimes:
                _fail(path, f"vehicle {vid} is not in the census")
        try:
            platoons.append(PlatoonDescriptor(head=head,
                                              followers=tuple(followers)))
        except ValueError as exc:
            raise ConfigError(f"{path}: {exc}") from exc

    spawns: List[SpawnEvent] = []
    used_ids = set(runtimes)
    for i, item in enumerate(_list(sec, "flows", "traffic")):
        path = f"traffic.flows[{i}]"
        if not isinstance(item, dict):
            _fail(path, "expected a mapping")
        item = dict(item)
        ids_from = _int(item, "ids_from", path, required=True, lo=0)
        count = _int(item, "count", path, required=True, lo=1)
        period = _num(item, "period_s", path, required=True, lo=1e-3)
        jitter = _num(item, "jitter_s", path, default=0.0, lo=0.0)
        start = _num(item, "start_s", path, default=0.0, lo=0.0)
        seg_id = _int(item, "segment", path, default=0)
        if seg_id not in net.segment_by_id:
            _fail(f"{path}.segment", f"unknown segment {seg_id}")
        lane = _int(item, "lane", path, default=0, lo=0)
        s = _num(item, "s_m", path, default=4.8, lo=0.0)
        speed = _num(item, "speed_mps", path, required=True, lo=0.0)
        desired = _num(item, "desired_mps", path, required=True, lo=0.1)
        vkind = _vehicle_kind(item, path)
        turn = _str(item, "turn", path,
                    choices=("left", "right", "straight"))
        _no_leftovers(item, path)
        for j in range(count):
            vid = ids_from + j
            if vid in used_ids:
                _fail(path, f"vehicle id {vid} already taken")
            used_ids.add(vid)
            t = start + j * period
            if jitter > 0:
                t += float(rng.uniform(-jitter, jitter))
            spawns.append(SpawnEvent(
                t=max(t, 0.0), vehicle=vid, kind=vkind, segment=seg_id,
                lane=lane, s=s, speed=speed, desired_speed=desired,
                turn_direction=turn))

    scripts = []
    for i, item in enumerate(_list(sec, "scripts", "traffic")):
        path = f"traffic.scripts[{i}]"
        if not isinstance(item, dict):
            _fail(path, "expected a mapping")
        item = dict(item)
        vid = _int(item, "vehicle", path, required=True)
        if vid not in used_ids:
            _fail(path, f"vehicle {vid} is not in the census")
        try:
            scripts.append(Script(
                vehicle=vid,
                start=_num(item, "start_s", path, required=True, lo=0.0),
                end=_num(item, "end_s", path, required=True, lo=0.0),
                kind=_str(item, "kind", path, required=True,
                          choices=("emergency_run", "malfunction")),
            ))
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"{path}: {exc}") from exc
        _no_leftovers(item, path)

    _no_leftovers(sec, "traffic")
    census = {"density": density, "road_km": road_km,
              "initial": len(runtimes), "flows": len(spawns)}
    return (runtimes, tuple(platoons), tuple(spawns), tuple(scripts),
            census)


def _attach_sensors(cfg: dict, runtimes: Dict[int, VehicleRuntime]) -> None:
    sec = _section(cfg, "sensors", "")
    if not sec:
        return
    channels: Dict[str, SensorChannel] = {}
    for i, item in enumerate(_list(sec, "channels", "sensors")):
        path = f"sensors.channels[{i}]"
        if not isinstance(item, dict):
            _fail(path, "expected a mapping")
        item = dict(item)
        name = _str(item, "name", path, required=True)
        route = _str(item, "route", path, default="Infotainment",
                     choices=tuple(_ROUTE_BY_NAME))
        try:
            channels[name] = SensorChannel(
                name=name,
                rate_hz=_num(item, "rate_hz", path, required=True, lo=1e-9),
                sample_bytes=_int(item, "sample_bytes", path, required=True,
                                  lo=1),
                epsilon=_num(item, "epsilon", path, default=0.0, lo=0.0),
                route=_ROUTE_BY_NAME[route],
                pattern=_str(item, "pattern", path, default="ramp"),
                base=_num(item, "base", path, default=0.0),
                slope=_num(item, "slope", path, default=1.0),
                amplitude=_num(item, "amplitude", path, default=1.0),
                period=_num(item, "period_s", path, default=10.0, lo=1e-9),
            )
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"{path}: {exc}") from exc
        _no_leftovers(item, path)
    for i, item in enumerate(_list(sec, "attach", "sensors")):
        path = f"sensors.attach[{i}]"
        if not isinstance(item, dict):
            _fail(path, "expected a mapping")
        item = dict(item)
        vids = _list(item, "vehicles", path)
        names = _list(item, "channels", path)
        _no_leftovers(item, path)
        for name in names:
            if name not in channels:
                _fail(f"{path}.channels", f"unknown channel {name!r}")
        for vid in vids:
            rt = runtimes.get(vid)
            if rt is None:
                _fail(f"{path}.vehicles",
                      f"vehicle {vid} is not in the initial census")
            for name in names:
                rt.streams.append(SensorStream(vehicle=vid,
                                               channel=channels[name]))
    _no_leftovers(sec, "sensors")


# -------------------------------------------------------------------- build


def build(cfg: dict, seed: Optional[int] = None,
          duration: Optional[float] = None,
          coop: Optional[bool] = None) -> ScenarioBundle:
    """Materialize a parsed scenario document into world + engine params.

    seed, duration and coop override the file without touching it; the
    sweep path rewrites the document itself via apply_overrides.
    """
    cfg = copy.deepcopy(cfg)
    version = _int(cfg, "schema_version", "", required=True)
    if version != SCHEMA_VERSION:
        _fail("schema_version",
              f"this build reads version {SCHEMA_VERSION}, got {version}")
    name = _str(cfg, "name", "", required=True)
    kind = _str(cfg, "scenario", "", required=True, choices=SCENARIO_KINDS)
    file_seed = _int(cfg, "seed", "", required=True)
    if seed is None:
        seed = file_seed
    if not 0 <= seed < 2 ** 64:
        _fail("seed", f"must fit an unsigned 64-bit integer, got {seed}")
    if duration is None:
        duration = _num(cfg, "duration_s", "", required=True, lo=0.0)
    else:
        _num(cfg, "duration_s", "", required=True, lo=0.0)
        if duration < 0:
            _fail("duration_s", "override must be nonnegative")
    dt = _num(cfg, "dt_s", "", default=0.1, lo=1e-6)
    psm_period = _num(cfg, "psm_period_s", "", default=0.1, lo=1e-6)
    if coop is None:
        coop = _bool(cfg, "cooperation", "", default=True)
    else:
        _bool(cfg, "cooperation", "", default=True)

    rng = np.random.default_rng(seed)
    subbands = _build_radio(cfg)
    links = _build_links(cfg)
    idm = _build_idm(cfg)
    net = _build_network(cfg)
    runtimes, platoons, spawns, scripts, _census = _build_traffic(
        cfg, net, kind, rng)
    _attach_sensors(cfg, runtimes)

    msgs = _section(cfg, "messages", "")
    psm_bytes = _int(msgs, "psm_bytes", "messages", default=100, lo=1)
    atm_bytes = _int(msgs, "atm_bytes", "messages", default=100, lo=1)
    info_bytes = _int(msgs, "info_bytes", "messages", default=1000, lo=1)
    info_rate = _num(msgs, "info_rate_hz", "messages", default=0.0, lo=0.0)
    _no_leftovers(msgs, "messages")

    cloud = _section(cfg, "cloud", "")
    cadence = _num(cloud, "cadence_s", "cloud", default=1.0, lo=1e-3)
    horizon = _num(cloud, "rtp_horizon_s", "cloud", default=5.0, lo=0.0)
    hops = _int(cloud, "aea_hops", "cloud", default=2, lo=0)
    factor = _num(cloud, "advisory_speed_factor", "cloud", default=0.5,
                  lo=0.01, hi=1.0)
    vc_ttl = _num(cloud, "vc_ttl_s", "cloud", default=10.0, lo=1e-3)
    _no_leftovers(cloud, "cloud")

    uplink = _section(cfg, "uplink", "")
    capacity = _num(uplink, "capacity_bytes_per_s", "uplink", default=0.0,
                    lo=0.0)
    up_ttl = _num(uplink, "ttl_s", "uplink", default=5.0, lo=1e-3)
    _no_leftovers(uplink, "uplink")

    _no_leftovers(cfg, "top level")

    try:
        params = EngineParams(
            dt=dt, duration=duration, psm_period=psm_period, coop=coop,
            idm=idm, subbands=subbands, links=links, psm_bytes=psm_bytes,
            atm_bytes=atm_bytes, info_bytes=info_bytes,
            info_rate_hz=info_rate, uplink_capacity_bps=capacity,
            uplink_ttl=up_ttl, cloud_cadence=cadence, rtp_horizon=horizon,
            aea_hops=hops, advisory_speed_factor=factor, vc_ttl=vc_ttl,
            scripts=scripts)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    world = World(network=net, runtimes=runtimes, platoons=platoons,
                  spawns=spawns)
    return ScenarioBundle(name=name, kind=kind, seed=seed, world=world,
                          params=params, rng=rng)


def bundled_config_path(name: str) -> str:
    """Path of a packaged reference scenario by file stem."""
    here = os.path.dirname(os.path.abspath(__file__))
    return os.path.join(here, "configs", f"{name}.yaml")
