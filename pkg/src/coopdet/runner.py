"""Experiment driver: per-frame extract -> transmit -> fuse -> decode -> score.

One ``run`` sweeps a list of channel latencies over a scenario and emits
a deterministic metric row per latency: AP at 0.5/0.7 IoU (all ground
truth, and the observed-only variant), the two average-byte figures, and
SemDB count statistics. Wall-clock timing never enters the CSV/JSON
outputs so byte-identical reruns stay byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import __version__, trace
from .boxes import DetectionBox, make_box
from .comm import Channel, dataset_ab, deserialize, serialize, transform_to_ego, transmission_cost
from .errors import ComparisonError, ContractViolation
from .extractor import ExtractorConfig, extract
from .fuser import FuserConfig, TemporalBuffer, fuse_and_decode
from .grid import VoxelSpec
from .metrics import average_precision
from .scenario import (
    Scenario,
    generate_scenario,
    load_scenario,
    observed_object_ids,
    preset_params,
    scenario_text,
    shuffle_ego_iter,
)

CSV_COLUMNS = (
    "latency_ms", "p", "rte", "shuffle_ego", "reweight", "revoxelize",
    "temporal_fusion", "fusion", "frames_evaluated",
    "ap50", "ap70", "ap50_observed", "ap70_observed",
    "ab_paper", "ab_wire", "no_comm",
    "semdb_mean", "semdb_min", "semdb_max",
)


@dataclass(frozen=True)
class RunConfig:
    seed: int
    scenario_path: str | None = None
    gen_preset: str | None = None
    gen_seed: int | None = None  # defaults to seed
    gen_objects: int = 6
    gen_frames: int = 8
    gen_speed: tuple = (0.0, 0.0)
    gen_noise: int = 0
    ego_id: int | None = None
    p: int = 2
    latencies_ms: tuple = (0, 100, 200, 300, 400)
    head_mode: str = "heuristic"
    channels: int = 32
    voxel_size: tuple = (0.4, 0.4)
    conf_threshold: float = 0.3
    rte: bool = True
    shuffle_ego: bool = False
    reweight: bool = True
    revoxelize: bool = True
    temporal_fusion: bool = True
    fusion: bool = True
    warmup_frames: int | None = None

    def __post_init__(self):
        if self.p < 0:
            raise ContractViolation("history depth p must be >= 0")
        if any(l < 0 for l in self.latencies_ms):
            raise ContractViolation("latencies must be >= 0")
        if self.scenario_path is None and self.gen_preset is None:
            raise ContractViolation("need a scenario file or a generator preset")


@dataclass
class MetricsReport:
    rows: list
    config: dict
    meta: dict

    def to_csv_text(self) -> str:
        lines = [",".join(CSV_COLUMNS)]
        for row in self.rows:
            lines.append(",".join(_cell(row[c]) for c in CSV_COLUMNS))
        return "\n".join(lines) + "\n"

    def to_json_text(self) -> str:
        return json.dumps(
            {"config": self.config, "meta": self.meta, "rows": self.rows},
            sort_keys=True,
            indent=2,
        ) + "\n"

    def write(self, prefix: str) -> tuple[str, str]:
        csv_path = f"{prefix}.csv"
        json_path = f"{prefix}.json"
        with open(csv_path, "w") as fh:
            fh.write(self.to_csv_text())
        with open(json_path, "w") as fh:
            fh.write(self.to_json_text())
        return csv_path, json_path

    @classmethod
    def from_json_file(cls, path: str) -> "MetricsReport":
        with open(path) as fh:
            blob = json.load(fh)
        return cls(blob["rows"], blob["config"], blob["meta"])


def _cell(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _scenario_digest(scenario: Scenario) -> str:
    return hashlib.sha256(scenario_text(scenario).encode()).hexdigest()[:16]


def resolve_scenario(config: RunConfig) -> Scenario:
    if config.scenario_path is not None:
        scenario = load_scenario(config.scenario_path)
    else:
        params = preset_params(
            config.gen_preset,
            n_objects=config.gen_objects,
            n_frames=config.gen_frames,
            speed_range=tuple(config.gen_speed),
            n_noise_points=config.gen_noise,
        )
        scenario = generate_scenario(
            config.seed if config.gen_seed is None else config.gen_seed, params
        )
    if config.ego_id is not None:
        if config.ego_id not in [a.agent_id for a in scenario.agents]:
            raise ContractViolation(f"ego {config.ego_id} not present in the scenario")
        scenario = replace(scenario, ego_id=config.ego_id)
    return scenario


def _box_to_world(box: DetectionBox, pose) -> DetectionBox:
    wx, wy = pose.to_world(np.array([box.x, box.y]))
    return make_box(
        float(wx), float(wy), box.z, box.h, box.w, box.l,
        box.yaw + pose.heading, box.confidence,
    )


def _model_configs(config: RunConfig, scenario: Scenario):
    # the voxel ranges are agent-local; inflate the scene bounds by the
    # largest agent offset so every agent's grid covers the whole scene
    x0, x1, y0, y1 = scenario.bounds
    pad_x = max(abs(a.pose.x) for a in scenario.agents)
    pad_y = max(abs(a.pose.y) for a in scenario.agents)
    voxel = VoxelSpec(
        (x0 - pad_x, x1 + pad_x), (y0 - pad_y, y1 + pad_y), tuple(config.voxel_size)
    )
    ecfg = ExtractorConfig(
        voxel=voxel,
        channels=config.channels,
        conf_threshold=config.conf_threshold,
        head_mode=config.head_mode,
        seed=config.seed,
    )
    fcfg = FuserConfig(
        voxel=voxel,
        channels=config.channels,
        conf_threshold=config.conf_threshold,
        head_mode=config.head_mode,
        revox_stride=2 if config.revoxelize else 4,
        frame_interval_ms=scenario.frame_interval_ms,
        seed=config.seed,
    )
    return ecfg, fcfg


def _simulate_latency(
    config: RunConfig,
    scenario: Scenario,
    ecfg: ExtractorConfig,
    fcfg: FuserConfig,
    latency_ms: int,
    warmup: int,
    ext_cache: dict,
) -> dict:
    agent_ids = [a.agent_id for a in scenario.agents]
    channels = {aid: Channel(latency_ms) for aid in agent_ids}
    buffers = {aid: TemporalBuffer(config.p + 1) for aid in agent_ids}
    picks = shuffle_ego_iter(scenario, config.seed, train_mode=config.shuffle_ego)

    frames_eval = []
    frames_eval_observed = []
    costs = []
    semdb_counts = []

    def extracted(f: int, aid: int):
        key = (f, aid)
        if key not in ext_cache:
            cloud = scenario.frames[f].agent_clouds[aid]
            ext_cache[key] = extract(
                cloud, ecfg, source_agent=aid, timestamp_ms=scenario.frames[f].timestamp_ms,
                reweight=config.reweight,
            )
        return ext_cache[key]

    for f, frame in enumerate(scenario.frames):
        now = frame.timestamp_ms
        ego, included = next(picks)
        ego_pose = frame.agent_poses[ego]

        sent = []
        for aid in agent_ids:
            if aid not in included:
                continue
            if aid != ego and not config.fusion:
                continue
            semdbs = extracted(f, aid)
            if aid == ego:
                # the ego's own data enters the buffer directly
                buffers[ego].push(now, (semdbs, frame.agent_poses[ego]))
            else:
                packet = serialize(semdbs, aid, now, channels=config.channels)
                channels[aid].send(packet, now)
                sent.append(packet)

        for aid in agent_ids:
            if aid == ego:
                continue
            for packet in channels[aid].poll(now):
                # buffered in the sender's frame, tagged with its capture pose;
                # re-expression happens at fuse time for whoever the ego is then
                cf = packet.timestamp_ms // scenario.frame_interval_ms
                capture_pose = scenario.frames[cf].agent_poses[aid]
                buffers[aid].push(packet.timestamp_ms, (deserialize(packet), capture_pose))

        if f < warmup:
            continue

        costs.append(transmission_cost(sent))
        limit = None if config.temporal_fusion else 1
        entries = []
        for aid in agent_ids:
            got = buffers[aid].entries(limit)
            if len(got) > 1:
                trace.record("temporal_fusion")
            for ts, (semdbs, capture_pose) in got:
                entries.append(
                    (ts, transform_to_ego(semdbs, capture_pose, ego_pose, ecfg.voxel))
                )
        semdb_counts.append(sum(len(s) for _, s in entries))

        dets_local = fuse_and_decode(entries, now, fcfg, use_rte=config.rte)
        dets = [_box_to_world(b, ego_pose) for b in dets_local]
        gts = list(frame.gt_boxes)
        frames_eval.append((dets, gts))

        seen = observed_object_ids(frame, agent_ids=set(included) if config.fusion else {ego})
        gts_obs = [g for gi, g in enumerate(frame.gt_boxes) if gi in seen]
        frames_eval_observed.append((dets, gts_obs))

    ap50 = average_precision(frames_eval, 0.5)
    ap70 = average_precision(frames_eval, 0.7)
    ap50_obs = average_precision(frames_eval_observed, 0.5)
    ap70_obs = average_precision(frames_eval_observed, 0.7)
    ab_paper, ab_wire, no_comm = dataset_ab(costs)

    return {
        "latency_ms": latency_ms,
        "p": config.p,
        "rte": config.rte,
        "shuffle_ego": config.shuffle_ego,
        "reweight": config.reweight,
        "revoxelize": config.revoxelize,
        "temporal_fusion": config.temporal_fusion,
        "fusion": config.fusion,
        "frames_evaluated": len(frames_eval),
        "ap50": ap50.value,
        "ap70": ap70.value,
        "ap50_observed": ap50_obs.value,
        "ap70_observed": ap70_obs.value,
        "ab_paper": ab_paper,
        "ab_wire": ab_wire,
        "no_comm": no_comm,
        "semdb_mean": float(np.mean(semdb_counts)) if semdb_counts else 0.0,
        "semdb_min": int(min(semdb_counts)) if semdb_counts else 0,
        "semdb_max": int(max(semdb_counts)) if semdb_counts else 0,
    }


def run(config: RunConfig) -> MetricsReport:
    """Execute the latency sweep described by ``config``."""
    t0 = time.perf_counter()
    scenario = resolve_scenario(config)
    ecfg, fcfg = _model_configs(config, scenario)

    if config.warmup_frames is not None:
        warmup = config.warmup_frames
    else:
        max_lag = max(config.latencies_ms) // scenario.frame_interval_ms
        warmup = min(max_lag + config.p, max(len(scenario.frames) - 1, 0))

    ext_cache: dict = {}
    rows = [
        _simulate_latency(config, scenario, ecfg, fcfg, lat, warmup, ext_cache)
        for lat in config.latencies_ms
    ]

    resolved = asdict(config)
    resolved["warmup_frames"] = warmup
    blob = json.dumps(resolved, sort_keys=True, default=list)
    meta = {
        "package_version": __version__,
        "config_hash": hashlib.sha256(blob.encode()).hexdigest()[:16],
        "scenario_digest": _scenario_digest(scenario),
        "n_agents": len(scenario.agents),
        "ego_id": scenario.ego_id,
    }
    report = MetricsReport(rows, json.loads(blob), meta)
    report.runtime_ms = (time.perf_counter() - t0) * 1000.0  # not serialized
    return report


def compare(reports: list[MetricsReport]) -> list[dict]:
    """Row-aligned AP/AB deltas of each report against the first.

    Reports must describe the same scene (same scenario digest) and
    sweep the same latencies.
    """
    if len(reports) < 2:
        raise ComparisonError("need at least two reports")
    base = reports[0]
    digests = {r.meta.get("scenario_digest") for r in reports}
    if len(digests) != 1:
        raise ComparisonError(f"reports describe different scenes: {sorted(digests)}")

    base_keys = [row["latency_ms"] for row in base.rows]
    out = []
    for ri, other in enumerate(reports[1:], start=1):
        keys = [row["latency_ms"] for row in other.rows]
        if keys != base_keys:
            raise ComparisonError(
                f"report {ri} latencies {keys} misaligned with baseline {base_keys}"
            )
        for brow, orow in zip(base.rows, other.rows):
            out.append(
                {
                    "report": ri,
                    "latency_ms": brow["latency_ms"],
                    "d_ap50": orow["ap50"] - brow["ap50"],
                    "d_ap70": orow["ap70"] - brow["ap70"],
                    "d_ab_paper": orow["ab_paper"] - brow["ab_paper"],
                    "d_ab_wire": orow["ab_wire"] - brow["ab_wire"],
                }
            )
    return out


def compare_csv_text(deltas: list[dict]) -> str:
    cols = ("report", "latency_ms", "d_ap50", "d_ap70", "d_ab_paper", "d_ab_wire")
    lines = [",".join(cols)]
    for d in deltas:
        lines.append(",".join(_cell(d[c]) for c in cols))
    return "\n".join(lines) + "\n"
