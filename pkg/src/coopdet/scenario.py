"""Synthetic multi-agent scenes with occlusion-aware LiDAR sampling.

A scene is a set of boxes (optionally moving), static rectangular
occluders, and agents with 2D scanning sensors. Each agent's cloud is
produced by casting rays at fixed angular resolution, replicated at a
few z heights; the nearest surface wins, so occlusion falls out of the
geometry. Points are expressed in each agent's local frame.

Scenes serialize to a small versioned text format holding geometry and
motion only; clouds are re-derived deterministically on load.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import trace
from .boxes import DetectionBox, make_box
from .comm import Pose
from .errors import ContractViolation, GenerationError, ScenarioFormatError
from .grid import PointCloud, wrap_pi

FORMAT_HEADER = "coopdet-scenario v1"
VEHICLE = "vehicle"
ROADSIDE = "roadside"


@dataclass(frozen=True)
class SensorSpec:
    angular_res_deg: float = 0.5
    z_layers: tuple = (0.5, 1.0, 1.5)
    max_range: float = 120.0


@dataclass(frozen=True)
class AgentSpec:
    agent_id: int
    kind: str
    pose: Pose
    sensor: SensorSpec = field(default_factory=SensorSpec)

    def __post_init__(self):
        if self.kind not in (VEHICLE, ROADSIDE):
            raise ContractViolation(f"unknown agent kind {self.kind!r}")


@dataclass(frozen=True)
class Occluder:
    """Static rectangle ("building") blocking every scan layer."""

    x: float
    y: float
    l: float
    w: float
    yaw: float = 0.0


@dataclass(frozen=True)
class ObjectDef:
    """Initial state of one object: box attributes plus planar velocity."""

    x: float
    y: float
    z: float = 0.8
    h: float = 1.6
    w: float = 2.0
    l: float = 4.5
    yaw: float = 0.0
    vx: float = 0.0
    vy: float = 0.0

    def box_at(self, dt_s: float) -> DetectionBox:
        return make_box(
            self.x + self.vx * dt_s, self.y + self.vy * dt_s,
            self.z, self.h, self.w, self.l, self.yaw,
        )


@dataclass(frozen=True)
class SceneParams:
    bounds: tuple = (-40.0, 40.0, -40.0, 40.0)  # x0, x1, y0, y1
    agents: tuple = ()
    ego_id: int = 0
    occluders: tuple = ()
    objects: tuple | None = None  # explicit ObjectDefs; random placement otherwise
    n_objects: int = 6
    n_frames: int = 5
    frame_interval_ms: int = 100
    length_range: tuple = (4.2, 4.8)
    width_range: tuple = (1.8, 2.2)
    height_range: tuple = (1.4, 1.8)
    z_center_range: tuple = (0.7, 0.9)
    speed_range: tuple = (0.0, 0.0)
    min_spacing: float = 8.0
    placement_margin: float = 6.0
    object_region: tuple | None = None  # defaults to bounds shrunk by margin
    n_noise_points: int = 0
    max_retries: int = 400


@dataclass(frozen=True)
class ScenarioFrame:
    timestamp_ms: int
    gt_boxes: tuple
    box_velocities: tuple
    agent_poses: dict
    agent_clouds: dict
    point_object_ids: dict  # per agent: (n,) owning gt index per point


@dataclass(frozen=True)
class Scenario:
    agents: tuple
    ego_id: int
    frame_interval_ms: int
    bounds: tuple
    occluders: tuple
    objects0: tuple
    n_noise_points: int
    noise_seed: int
    frames: tuple

    @property
    def vehicle_ids(self) -> list[int]:
        return [a.agent_id for a in self.agents if a.kind == VEHICLE]

    def agent(self, agent_id: int) -> AgentSpec:
        for a in self.agents:
            if a.agent_id == agent_id:
                return a
        raise KeyError(agent_id)


def _rect_segments(x, y, l, w, yaw):
    """Four BEV edges of a rectangle, each as (ax, ay, bx, by)."""
    c, s = math.cos(yaw), math.sin(yaw)
    local = [(l / 2, w / 2), (-l / 2, w / 2), (-l / 2, -w / 2), (l / 2, -w / 2)]
    pts = [(x + lx * c - ly * s, y + lx * s + ly * c) for lx, ly in local]
    return [pts[i] + pts[(i + 1) % 4] for i in range(4)]


def _ray_segment_hits(origin, dirs, segs):
    """First-hit distance and segment id per ray.

    dirs: (R, 2) unit rays from origin; segs: (S, 4) endpoint packs.
    Returns (t, seg_id) arrays with inf / -1 where nothing is hit.
    """
    r = dirs.shape[0]
    if segs.shape[0] == 0:
        return np.full(r, np.inf), np.full(r, -1, np.int64)
    a = segs[:, 0:2]
    s = segs[:, 2:4] - a
    q = a - np.asarray(origin)

    denom = dirs[:, None, 0] * s[None, :, 1] - dirs[:, None, 1] * s[None, :, 0]
    qxs = q[None, :, 0] * s[None, :, 1] - q[None, :, 1] * s[None, :, 0]
    qxd = q[None, :, 0] * dirs[:, None, 1] - q[None, :, 1] * dirs[:, None, 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(denom != 0, qxs / denom, np.inf)
        u = np.where(denom != 0, qxd / denom, -1.0)
    valid = (t > 1e-9) & (u >= 0.0) & (u <= 1.0)
    t = np.where(valid, t, np.inf)
    best = t.argmin(axis=1)
    tbest = t[np.arange(r), best]
    return tbest, np.where(np.isfinite(tbest), best, -1)


def _scan_agent(agent: AgentSpec, boxes, occluders, noise_rng=None, n_noise=0):
    """One agent's cloud: ray-cast box and occluder surfaces per z layer."""
    pose = agent.pose
    sensor = agent.sensor
    n_rays = int(round(360.0 / sensor.angular_res_deg))
    angles = pose.heading + np.arange(n_rays) * math.radians(sensor.angular_res_deg)
    dirs = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    origin = (pose.x, pose.y)

    pts = []
    owners = []
    occ_segs = [seg for o in occluders for seg in _rect_segments(o.x, o.y, o.l, o.w, o.yaw)]
    for z in sensor.z_layers:
        segs = list(occ_segs)
        seg_owner = [-1] * len(occ_segs)
        for bi, b in enumerate(boxes):
            if abs(z - b.z) <= b.h / 2:
                segs += _rect_segments(b.x, b.y, b.l, b.w, b.yaw)
                seg_owner += [bi] * 4
        t, sid = _ray_segment_hits(origin, dirs, np.array(segs).reshape(-1, 4))
        hit = np.isfinite(t) & (t <= sensor.max_range)
        owner = np.array([seg_owner[i] if i >= 0 else -1 for i in sid])
        keep = hit & (owner >= 0)
        if keep.any():
            world = np.asarray(origin) + t[keep, None] * dirs[keep]
            intensity = 1.0 - t[keep] / sensor.max_range
            local = pose.to_local(world)
            block = np.column_stack([local, np.full(keep.sum(), z), intensity])
            pts.append(block)
            owners.append(owner[keep])

    if n_noise and noise_rng is not None:
        # clutter: free-space returns along random unobstructed directions
        segs_all = np.array(
            occ_segs
            + [s for b in boxes for s in _rect_segments(b.x, b.y, b.l, b.w, b.yaw)]
        ).reshape(-1, 4)
        ang = noise_rng.uniform(0, 2 * math.pi, n_noise)
        rad = noise_rng.uniform(2.0, sensor.max_range * 0.5, n_noise)
        ndirs = np.stack([np.cos(ang), np.sin(ang)], axis=1)
        tlim, _ = _ray_segment_hits(origin, ndirs, segs_all)
        ok = rad < np.minimum(tlim, sensor.max_range)
        if ok.any():
            world = np.asarray(origin) + rad[ok, None] * ndirs[ok]
            local = pose.to_local(world)
            block = np.column_stack(
                [local, np.full(ok.sum(), sensor.z_layers[0]), np.full(ok.sum(), 0.3)]
            )
            pts.append(block)
            owners.append(np.full(ok.sum(), -1, np.int64))

    if pts:
        cloud = PointCloud(np.vstack(pts))
        ids = np.concatenate(owners)
    else:
        cloud = PointCloud(np.zeros((0, 4)))
        ids = np.zeros(0, np.int64)
    return cloud, ids


def _in_bounds(x, y, bounds, margin=0.0):
    x0, x1, y0, y1 = bounds
    return x0 + margin <= x <= x1 - margin and y0 + margin <= y <= y1 - margin


def _place_objects(rng: np.random.Generator, params: SceneParams):
    region = params.object_region or (
        params.bounds[0] + params.placement_margin,
        params.bounds[1] - params.placement_margin,
        params.bounds[2] + params.placement_margin,
        params.bounds[3] - params.placement_margin,
    )
    horizon_s = (params.n_frames - 1) * params.frame_interval_ms / 1000.0
    placed = []
    attempts = 0
    while len(placed) < params.n_objects:
        if attempts > params.max_retries * max(params.n_objects, 1):
            raise GenerationError(
                f"could not place {params.n_objects} objects after {attempts} attempts"
            )
        attempts += 1
        x = float(rng.uniform(region[0], region[1]))
        y = float(rng.uniform(region[2], region[3]))
        speed = float(rng.uniform(*params.speed_range))
        heading = float(rng.uniform(-math.pi, math.pi))
        vx, vy = speed * math.cos(heading), speed * math.sin(heading)
        # trajectory must stay inside the scene for every frame
        if not (
            _in_bounds(x, y, params.bounds, 2.0)
            and _in_bounds(x + vx * horizon_s, y + vy * horizon_s, params.bounds, 2.0)
        ):
            continue
        too_close = any(
            math.hypot(x - o.x, y - o.y) < params.min_spacing
            or math.hypot(x + vx * horizon_s - (o.x + o.vx * horizon_s),
                          y + vy * horizon_s - (o.y + o.vy * horizon_s)) < params.min_spacing
            for o in placed
        )
        if too_close:
            continue
        if any(math.hypot(x - a.pose.x, y - a.pose.y) < 6.0 for a in params.agents):
            continue
        if any(math.hypot(x - o.x, y - o.y) < (o.l + o.w) / 2 + 3.0 for o in params.occluders):
            continue
        placed.append(
            ObjectDef(
                x, y,
                float(rng.uniform(*params.z_center_range)),
                float(rng.uniform(*params.height_range)),
                float(rng.uniform(*params.width_range)),
                float(rng.uniform(*params.length_range)),
                wrap_pi(heading if speed > 0 else float(rng.uniform(-math.pi, math.pi))),
                vx, vy,
            )
        )
    return tuple(placed)


def _materialize(
    agents, ego_id, objects0, occluders, bounds, n_frames, frame_interval_ms,
    n_noise_points, noise_seed,
) -> Scenario:
    frames = []
    for f in range(n_frames):
        dt_s = f * frame_interval_ms / 1000.0
        boxes = tuple(o.box_at(dt_s) for o in objects0)
        for b in boxes:
            if not _in_bounds(b.x, b.y, bounds):
                raise GenerationError("object left the scene bounds")
        clouds = {}
        ids = {}
        for a in agents:
            noise_rng = (
                np.random.default_rng(
                    np.random.SeedSequence([noise_seed, f, a.agent_id])
                )
                if n_noise_points
                else None
            )
            clouds[a.agent_id], ids[a.agent_id] = _scan_agent(
                a, boxes, occluders, noise_rng, n_noise_points
            )
        frames.append(
            ScenarioFrame(
                timestamp_ms=f * frame_interval_ms,
                gt_boxes=boxes,
                box_velocities=tuple((o.vx, o.vy) for o in objects0),
                agent_poses={a.agent_id: a.pose for a in agents},
                agent_clouds=clouds,
                point_object_ids=ids,
            )
        )
    return Scenario(
        agents=tuple(agents),
        ego_id=ego_id,
        frame_interval_ms=frame_interval_ms,
        bounds=tuple(bounds),
        occluders=tuple(occluders),
        objects0=tuple(objects0),
        n_noise_points=n_noise_points,
        noise_seed=noise_seed,
        frames=tuple(frames),
    )


def generate_scenario(seed: int, params: SceneParams) -> Scenario:
    """Deterministic scene synthesis from a seed and layout parameters."""
    if not params.agents:
        raise ContractViolation("need at least one agent")
    if params.ego_id not in [a.agent_id for a in params.agents]:
        raise ContractViolation("ego_id must name one of the agents")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5CE0]))
    objects0 = params.objects if params.objects is not None else _place_objects(rng, params)
    noise_seed = int(rng.integers(0, 2**31 - 1))
    return _materialize(
        params.agents, params.ego_id, objects0, params.occluders, params.bounds,
        params.n_frames, params.frame_interval_ms, params.n_noise_points, noise_seed,
    )


def shuffle_ego_iter(scenario: Scenario, seed: int, train_mode: bool, q: float = 0.75):
    """Per-frame (ego id, included agent ids).

    Training draws the ego uniformly from the vehicle agents and keeps
    each other agent with probability q; evaluation always uses the
    designated ego with everyone included.
    """
    vehicles = scenario.vehicle_ids
    if not vehicles:
        raise ContractViolation("scenario has no vehicle agent")
    all_ids = [a.agent_id for a in scenario.agents]
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5E90]))
    for _ in scenario.frames:
        if not train_mode:
            yield scenario.ego_id, tuple(all_ids)
            continue
        trace.record("shuffle_ego")
        ego = int(vehicles[rng.integers(len(vehicles))])
        included = tuple(
            i for i in all_ids if i == ego or rng.random() < q
        )
        yield ego, included


def observed_object_ids(frame: ScenarioFrame, agent_ids=None) -> set:
    """Ground-truth indices with at least one point in the given clouds."""
    seen = set()
    for aid, ids in frame.point_object_ids.items():
        if agent_ids is not None and aid not in agent_ids:
            continue
        seen.update(int(i) for i in np.unique(ids) if i >= 0)
    return seen


# --- plain-text scene files -------------------------------------------------


def scenario_text(scenario: Scenario) -> str:
    """Canonical text form; also the identity used for report digests."""
    lines = [FORMAT_HEADER]
    lines.append("bounds %r %r %r %r" % scenario.bounds)
    lines.append(f"interval_ms {scenario.frame_interval_ms}")
    lines.append(f"frames {len(scenario.frames)}")
    lines.append(f"ego {scenario.ego_id}")
    lines.append(f"noise {scenario.n_noise_points} {scenario.noise_seed}")
    for a in scenario.agents:
        layers = ",".join(repr(z) for z in a.sensor.z_layers)
        lines.append(
            f"agent {a.agent_id} {a.kind} {a.pose.x!r} {a.pose.y!r} {a.pose.heading!r} "
            f"{a.sensor.angular_res_deg!r} {layers} {a.sensor.max_range!r}"
        )
    for o in scenario.occluders:
        lines.append(f"occluder {o.x!r} {o.y!r} {o.l!r} {o.w!r} {o.yaw!r}")
    for o in scenario.objects0:
        lines.append(
            f"object {o.x!r} {o.y!r} {o.z!r} {o.h!r} {o.w!r} {o.l!r} {o.yaw!r} {o.vx!r} {o.vy!r}"
        )
    return "\n".join(lines) + "\n"


def save_scenario(scenario: Scenario, path: str) -> None:
    with open(path, "w") as fh:
        fh.write(scenario_text(scenario))


def load_scenario(path: str) -> Scenario:
    """Parse, validate, and re-materialize a scene file."""
    with open(path) as fh:
        raw = [ln.strip() for ln in fh if ln.strip()]
    if not raw or raw[0] != FORMAT_HEADER:
        raise ScenarioFormatError(f"missing or unsupported header (want {FORMAT_HEADER!r})")

    bounds = None
    interval = None
    n_frames = None
    ego = None
    noise = (0, 0)
    agents = []
    occluders = []
    objects = []
    try:
        for ln in raw[1:]:
            tok = ln.split()
            key = tok[0]
            if key == "bounds":
                bounds = tuple(float(v) for v in tok[1:5])
            elif key == "interval_ms":
                interval = int(tok[1])
            elif key == "frames":
                n_frames = int(tok[1])
            elif key == "ego":
                ego = int(tok[1])
            elif key == "noise":
                noise = (int(tok[1]), int(tok[2]))
            elif key == "agent":
                layers = tuple(float(z) for z in tok[7].split(","))
                agents.append(
                    AgentSpec(
                        int(tok[1]), tok[2],
                        Pose(float(tok[3]), float(tok[4]), float(tok[5])),
                        SensorSpec(float(tok[6]), layers, float(tok[8])),
                    )
                )
            elif key == "occluder":
                occluders.append(Occluder(*(float(v) for v in tok[1:6])))
            elif key == "object":
                objects.append(ObjectDef(*(float(v) for v in tok[1:10])))
            else:
                raise ScenarioFormatError(f"unknown record {key!r}")
    except (ValueError, IndexError) as exc:
        raise ScenarioFormatError(f"malformed line {ln!r}: {exc}") from exc

    if None in (bounds, interval, n_frames, ego):
        raise ScenarioFormatError("missing bounds/interval_ms/frames/ego record")
    if not agents:
        raise ScenarioFormatError("scene has no agents")
    if ego not in [a.agent_id for a in agents]:
        raise ScenarioFormatError("ego references an unknown agent")
    for o in objects:
        if min(o.h, o.w, o.l) <= 0:
            raise ScenarioFormatError("object with non-positive dimensions")
        if not _in_bounds(o.x, o.y, bounds):
            raise ScenarioFormatError("object outside scene bounds")
    try:
        return _materialize(
            tuple(agents), ego, tuple(objects), tuple(occluders), bounds,
            n_frames, interval, noise[0], noise[1],
        )
    except GenerationError as exc:
        raise ScenarioFormatError(str(exc)) from exc


# --- canned layouts ---------------------------------------------------------


def preset_params(name: str, **overrides) -> SceneParams:
    """Canned scene layouts used by the CLI and the test-bench runs."""
    if name == "open":
        agents = (
            AgentSpec(0, VEHICLE, Pose(-30.0, 0.0, 0.0)),
            AgentSpec(1, VEHICLE, Pose(30.0, 0.0, 0.0)),
            AgentSpec(2, ROADSIDE, Pose(0.0, 30.0, 0.0)),
        )
        base = SceneParams(agents=agents, ego_id=0)
    elif name == "walled":
        # a wall hides part of the scene from the left-hand ego; the
        # right-hand vehicle and the roadside unit see behind it
        agents = (
            AgentSpec(0, VEHICLE, Pose(-30.0, 0.0, 0.0)),
            AgentSpec(1, VEHICLE, Pose(25.0, 0.0, 0.0)),
            AgentSpec(2, ROADSIDE, Pose(0.0, 28.0, 0.0)),
        )
        base = SceneParams(
            agents=agents,
            ego_id=0,
            occluders=(Occluder(-11.0, 0.0, 2.0, 10.0),),
            object_region=(-8.0, 24.0, -20.0, 20.0),
            min_spacing=10.0,
        )
    else:
        raise ContractViolation(f"unknown preset {name!r}")
    return replace(base, **overrides)
