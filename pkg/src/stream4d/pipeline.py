"""End-to-end orchestration: dataset synthesis, streaming reconstruction,
evaluation and benchmarking.

Streaming order for a manifest with timestamps ``t_0 < t_1 < ...``::

    for each timestamp: for each sensor: encode -> memory read -> heads
                        (all reads of a timestamp happen before its inserts)
    per sensor, after the sequence: flow-residual masks
    per frame: registration into world coordinates
    per timestamp: merged, confidence-filtered cloud

Outputs are written with deterministic byte layouts; every wall-clock
figure goes to ``timing.json`` so the remaining files can be hashed.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .align import MergedCloud, align_to_world, assemble_scene
from .backbone import FrameInput, OracleBackbone, StreamState, ToyLinearBackbone, make_pools, step
from .errors import ConfigError, DataError, ReconstructionError
from .fields import ConfidenceMap, FlowField
from .flow import CoarseMask, IdentityRefiner, RegionGrowRefiner, predict
from .geometry import DepthMap, Intrinsics, Pointmap, SE3Pose, pose_estimate, transform, unproject
from .io import (FrameRecord, Manifest, RunConfig, SensorInfo, load_manifest, manifest_dict, read_grid,
                 read_pgm, write_grid, write_json, write_pgm, write_ply)
from .memory import PoolConfig, rig_adjacency
from .metrics import DepthReport, ReconReport, depth_metrics_values, recon_report
from .synth import SceneSpec, default_scene, gt_flow, render_all

BENCH_NOTE = ("single-process CPU reference run on synthetic frames; "
              "not comparable to GPU throughput or memory figures")


def _frame_name(ti: int, c: int) -> str:
    return f"t{ti:03d}_c{c}"


# --------------------------------------------------------------------------
# synth


def scene_from_config(cfg: dict | None, seed: int | None = None) -> SceneSpec:
    """A full scene description, or keyword overrides for the default scene."""
    cfg = dict(cfg or {})
    if "planes" in cfg:
        if seed is not None:
            cfg["seed"] = seed
        return SceneSpec.from_dict(cfg)
    if seed is not None:
        cfg["seed"] = seed
    allowed = {"num_timestamps", "dt", "size", "dynamic", "seed"}
    unknown = set(cfg) - allowed
    if unknown:
        raise ConfigError(f"unknown scene options: {sorted(unknown)}")
    return default_scene(**cfg)


def synthesize(scene: SceneSpec, out) -> Path:
    """Render ``scene`` into a dataset directory and return its manifest path.

    Layout: ``images/*.pgm``, ``depth/*.d4rg``, ``masks/*.pgm`` (ground-truth
    dynamic masks), ``flow/*_fwd.d4rg`` and ``flow/*_bwd.d4rg`` (exact
    optical flow to and from the next timestamp), ``scene.json`` and
    ``manifest.json``.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    bundles = render_all(scene)
    n_t = len(scene.timestamps)
    frames = []
    for ti in range(n_t):
        for c in range(scene.num_sensors):
            b = bundles[(ti, c)]
            name = _frame_name(ti, c)
            rec = {"time_index": ti, "sensor": c, "pose": b.pose.to_dict(),
                   "image": f"images/{name}.pgm", "depth": f"depth/{name}.d4rg", "mask": f"masks/{name}.pgm"}
            write_pgm(out / rec["image"], b.image)
            write_grid(out / rec["depth"], b.depth.depth, b.depth.valid)
            write_pgm(out / rec["mask"], b.dynamic_mask)
            if ti + 1 < n_t:
                fwd = gt_flow(scene, ti, ti + 1, c, b)
                bwd = gt_flow(scene, ti + 1, ti, c, bundles[(ti + 1, c)])
                rec["flow_forward"] = f"flow/{name}_fwd.d4rg"
                rec["flow_backward"] = f"flow/{name}_bwd.d4rg"
                write_grid(out / rec["flow_forward"], fwd.flow, fwd.valid)
                write_grid(out / rec["flow_backward"], bwd.flow, bwd.valid)
            frames.append(rec)
    sensors = [SensorInfo(c, scene.intrinsics[c], scene.rig[c]) for c in range(scene.num_sensors)]
    write_json(out / "scene.json", scene.to_dict())
    path = out / "manifest.json"
    write_json(path, manifest_dict(".", sensors, scene.timestamps, frames))
    return path


# --------------------------------------------------------------------------
# dataset access


def load_image(rec: FrameRecord) -> np.ndarray:
    return read_pgm(rec.image).astype(np.float64) / 255.0


def load_depth(rec: FrameRecord) -> DepthMap:
    if rec.depth is None:
        raise DataError(f"no ground-truth depth for frame {rec.time_index} of sensor {rec.sensor}")
    g = read_grid(rec.depth)
    return DepthMap(g.squeeze().astype(np.float64), g.valid)


def gt_world_pointmap(m: Manifest, ti: int, c: int) -> Pointmap:
    rec = m.frame(ti, c)
    return unproject(load_depth(rec), m.sensors[c].intrinsics, rec.pose, "world")


def sequence_frame(m: Manifest, c: int) -> SE3Pose:
    """Sequence frame of sensor ``c``: its camera frame at the first timestamp."""
    return m.frame(0, c).pose


def gt_sequence_pointmap(m: Manifest, ti: int, c: int) -> Pointmap:
    return transform(gt_world_pointmap(m, ti, c), sequence_frame(m, c).inverse(), "sequence")


def gt_sequence_camera(m: Manifest, ti: int, c: int) -> tuple[Intrinsics, SE3Pose]:
    return m.sensors[c].intrinsics, sequence_frame(m, c).inverse() @ m.frame(ti, c).pose


class FileFlowProvider:
    """Flow between consecutive timestamps, read from the dataset."""

    def __init__(self, m: Manifest, sensor: int):
        self.m = m
        self.sensor = sensor

    def flow(self, i1: int, i2: int) -> tuple[FlowField, FlowField]:
        if i2 != i1 + 1:
            raise ValueError("only consecutive-frame flow is stored")
        rec = self.m.frame(i1, self.sensor)
        if rec.flow_forward is None or rec.flow_backward is None:
            raise DataError("missing flow files").at(self.m.timestamps[i1], self.sensor)
        f, b = read_grid(rec.flow_forward), read_grid(rec.flow_backward)
        return (FlowField(f.data.astype(np.float64), f.valid), FlowField(b.data.astype(np.float64), b.valid))


# --------------------------------------------------------------------------
# reconstruction


@dataclass(eq=False)
class Reconstruction:
    config: RunConfig
    world: dict[tuple[int, int], Pointmap]
    confidence: dict[tuple[int, int], ConfidenceMap]
    masks: dict[tuple[int, int], np.ndarray]
    residuals: dict[tuple[int, int], CoarseMask]
    clouds: dict[int, MergedCloud]
    pools: list
    summary: dict
    timing: dict = field(default_factory=dict)


def make_backbone(cfg: RunConfig, m: Manifest):
    if cfg.backbone == "oracle":
        return OracleBackbone(cfg.feature_dim, seed=cfg.seed)
    k = m.sensors[0].intrinsics
    return ToyLinearBackbone(k.height, k.width, cfg.feature_dim, seed=cfg.seed)


def _with_context(fn, ti, c):
    try:
        return fn()
    except ReconstructionError as e:
        if e.context is None:
            e.at(ti, c)
        raise


def reconstruct(m: Manifest, cfg: RunConfig) -> Reconstruction:
    n_t, n_c = len(m.timestamps), m.num_sensors
    pool_cfg = PoolConfig(cfg.feature_dim, cfg.working_frames, cfg.capacity, cfg.sim_threshold,
                          cfg.related_timestamps)
    pools = make_pools(n_c, pool_cfg)
    adjacency = rig_adjacency([s.intrinsics for s in m.sensors], [s.rig for s in m.sensors])
    backbone = make_backbone(cfg, m)
    states = [StreamState() for _ in range(n_c)]
    images: dict[tuple[int, int], np.ndarray] = {}
    pointmaps: dict[tuple[int, int], Pointmap] = {}
    confidence: dict[tuple[int, int], ConfidenceMap] = {}
    frame_log = []
    timing = {"step_s": {}, "timestamp_end_s": []}
    t_start = time.perf_counter()
    peak = 0

    for ti in range(n_t):
        t = m.timestamps[ti]
        pending = []
        for c in range(n_c):
            t0 = time.perf_counter()
            rec = m.frame(ti, c)
            image = _with_context(lambda: load_image(rec), t, c)
            images[(ti, c)] = image
            gt_pm = gt_depth = None
            if cfg.backbone == "oracle":
                gt_pm = _with_context(lambda: gt_sequence_pointmap(m, ti, c), t, c)
                gt_depth = load_depth(rec).depth
            frame = FrameInput(image, t, c, ti, gt_pm, gt_depth)
            res = _with_context(lambda: step(frame, states[c], pools, backbone, stage=cfg.stage,
                                             adjacency=adjacency, insert=False), t, c)
            states[c] = res.state
            pointmaps[(ti, c)] = res.pointmap
            confidence[(ti, c)] = res.confidence
            pending.append((c, res))
            frame_log.append({"time_index": ti, "sensor": c, "selected": res.selected, "ops": res.ops,
                              "sensors_hit": list(res.sensors_hit)})
            timing["step_s"][_frame_name(ti, c)] = time.perf_counter() - t0
        # barrier: every sensor has read the pools for this timestamp
        for c, res in pending:
            _with_context(lambda: pools[c].insert(res.keys, res.values, t), t, c)
        peak = max(peak, sum(len(p) for p in pools))
        timing["timestamp_end_s"].append(time.perf_counter() - t_start)

    # cameras and dynamic masks, one sensor sequence at a time
    t0 = time.perf_counter()
    masks, residuals, cameras = {}, {}, {}
    refiner = RegionGrowRefiner() if cfg.refiner == "region" else IdentityRefiner()
    for c in range(n_c):
        seq = [pointmaps[(ti, c)] for ti in range(n_t)]
        for ti in range(n_t):
            if cfg.cameras == "gt":
                cameras[(ti, c)] = gt_sequence_camera(m, ti, c)
            else:
                cameras[(ti, c)] = _with_context(lambda: pose_estimate(seq[ti], ransac=cfg.ransac),
                                                 m.timestamps[ti], c)
        if cfg.flow == "files" and n_t >= 2:
            pred = _with_context(lambda: predict(seq, [images[(ti, c)] for ti in range(n_t)],
                                                 FileFlowProvider(m, c), refiner, cfg.tau,
                                                 cameras=[cameras[(ti, c)] for ti in range(n_t)]), None, c)
            for ti in range(n_t):
                masks[(ti, c)] = pred.masks[ti]
                residuals[(ti, c)] = pred.residuals[ti]
        else:
            for ti in range(n_t):
                h, w = seq[ti].shape
                masks[(ti, c)] = np.zeros((h, w), bool)
                residuals[(ti, c)] = CoarseMask(np.zeros((h, w)), np.zeros((h, w), bool))
    timing["masks_s"] = time.perf_counter() - t0

    # registration and merging
    t0 = time.perf_counter()
    world = {}
    for ti in range(n_t):
        t = m.timestamps[ti]
        for c in range(n_c):
            k, pose = m.sensors[c].intrinsics, m.frame(ti, c).pose
            world[(ti, c)] = _with_context(lambda: align_to_world(pointmaps[(ti, c)], k, pose,
                                                                  camera=cameras[(ti, c)]), t, c)
    clouds = assemble_scene([(ti, c, world[(ti, c)], confidence[(ti, c)])
                             for ti in range(n_t) for c in range(n_c)], cfg.gamma)
    timing["align_s"] = time.perf_counter() - t0
    timing["total_s"] = time.perf_counter() - t_start

    for entry in frame_log:
        key = (entry["time_index"], entry["sensor"])
        entry["dynamic_pixels"] = int(masks[key].sum())
        entry["valid_points"] = int(world[key].valid.sum())
    summary = {
        "config": cfg.to_dict(),
        "num_sensors": n_c,
        "num_timestamps": n_t,
        "timestamps": list(m.timestamps),
        "adjacency": [[int(j) for j in np.flatnonzero(adjacency[c])] for c in range(n_c)],
        "pools": [{"sensor": p.sensor, "entries": len(p), "working": len(p.working),
                   "long_term": len(p.longterm), "pruned": p.pruned, "discarded": p.discarded} for p in pools],
        "peak_pool_entries": int(peak),
        "dynamic_pixels": int(sum(int(v.sum()) for v in masks.values())),
        "points_per_timestamp": {str(ti): len(cl) for ti, cl in clouds.items()},
        "frames": frame_log,
    }
    return Reconstruction(cfg, world, confidence, masks, residuals, clouds, pools, summary, timing)


def write_reconstruction(r: Reconstruction, out, *, binary_ply: bool = True) -> None:
    """Grids, masks, clouds, pool snapshots, ``summary.json`` and ``timing.json``."""
    out = Path(out)
    for (ti, c), pm in sorted(r.world.items()):
        name = _frame_name(ti, c)
        write_grid(out / "world" / f"{name}.d4rg", pm.points, pm.valid)
        write_grid(out / "confidence" / f"{name}.d4rg", r.confidence[(ti, c)].values)
    write_masks(r, out)
    for ti, cl in r.clouds.items():
        write_ply(out / "clouds" / f"t{ti:03d}.ply", cl.points, cl.confidence, cl.sensor, cl.time_index,
                  binary=binary_ply)
    for p in r.pools:
        (out / "pools").mkdir(parents=True, exist_ok=True)
        (out / "pools" / f"sensor{p.sensor}.d4mp").write_bytes(p.to_bytes())
    write_json(out / "summary.json", r.summary)
    write_json(out / "timing.json", r.timing)


def write_masks(r: Reconstruction, out) -> None:
    out = Path(out)
    for (ti, c), mask in sorted(r.masks.items()):
        name = _frame_name(ti, c)
        write_pgm(out / "masks" / f"{name}.pgm", mask)
        res = r.residuals[(ti, c)]
        write_grid(out / "residuals" / f"{name}.d4rg", res.residual, res.valid)


# --------------------------------------------------------------------------
# evaluation


def _average_reports(reports: list, cls):
    names = list(cls.__dataclass_fields__)
    return cls(**{n: float(np.mean([getattr(r, n) for r in reports])) for n in names})


def evaluate(pred_dir, m: Manifest, gamma: float = 1.5) -> dict:
    """Reconstruction metrics per timestamp and depth metrics per sensor, averaged.

    Predicted world points below confidence ``gamma`` are dropped before the
    reconstruction metrics; depth metrics use every valid predicted pixel,
    measured along the ground-truth camera's optical axis.
    """
    pred_dir = Path(pred_dir)
    n_t, n_c = len(m.timestamps), m.num_sensors
    pred, conf = {}, {}
    for ti in range(n_t):
        for c in range(n_c):
            name = _frame_name(ti, c)
            wp, cp = pred_dir / "world" / f"{name}.d4rg", pred_dir / "confidence" / f"{name}.d4rg"
            for p in (wp, cp):
                if not p.is_file():
                    raise DataError(f"missing prediction {p}").at(m.timestamps[ti], c)
            g = read_grid(wp)
            pred[(ti, c)] = Pointmap(g.data.astype(np.float64), g.valid, "world")
            conf[(ti, c)] = read_grid(cp).squeeze().astype(np.float64)

    recon = []
    for ti in range(n_t):
        gts = [gt_world_pointmap(m, ti, c) for c in range(n_c)]
        preds = [Pointmap(pred[(ti, c)].points, pred[(ti, c)].valid & (conf[(ti, c)] >= gamma), "world")
                 for c in range(n_c)]
        recon.append(recon_report(np.concatenate([p.valid_points() for p in preds]),
                                  np.concatenate([g.valid_points() for g in gts]), preds, gts))
    per_sensor = []
    for c in range(n_c):
        d_pred, d_gt = [], []
        for ti in range(n_t):
            rec = m.frame(ti, c)
            gt = _with_context(lambda: load_depth(rec), m.timestamps[ti], c)
            z = rec.pose.inverse().apply(pred[(ti, c)].points)[..., 2]
            ok = pred[(ti, c)].valid & gt.valid & (z > 0)
            d_pred.append(z[ok])
            d_gt.append(gt.depth[ok])
        per_sensor.append(depth_metrics_values(np.concatenate(d_pred), np.concatenate(d_gt)))
    recon_avg = _average_reports(recon, ReconReport)
    depth_avg = _average_reports(per_sensor, DepthReport)
    return {
        "gamma": gamma,
        "reconstruction": recon_avg.to_dict(),
        "reconstruction_per_timestamp": {str(ti): r.to_dict() for ti, r in enumerate(recon)},
        "depth": depth_avg.to_dict(),
        "depth_per_sensor": {str(c): r.to_dict() for c, r in enumerate(per_sensor)},
    }


# --------------------------------------------------------------------------
# benchmark


def summary_digest(summary: dict) -> str:
    return hashlib.sha256(json.dumps(summary, sort_keys=True).encode()).hexdigest()


def bench(m: Manifest, cfg: RunConfig, repeats: int = 3) -> dict:
    """Repeated reconstructions; timings are medians over the repeats."""
    if repeats < 1:
        raise ConfigError("repeats must be >= 1")
    totals, cumulative, digests, runs = [], [], [], None
    for _ in range(repeats):
        r = reconstruct(m, cfg)
        totals.append(r.timing["total_s"])
        cumulative.append(r.timing["timestamp_end_s"])
        digests.append(summary_digest(r.summary))
        runs = r
    frames = len(m.timestamps) * m.num_sensors
    t_4d = float(np.median(totals))
    report = {
        "frames": frames,
        "repeats": repeats,
        "warning": "fewer than 3 repeats; the median is not robust" if repeats < 3 else None,
        "deterministic": len(set(digests)) == 1,
        "summary_digest": digests[0],
        "peak_pool_entries": runs.summary["peak_pool_entries"],
        "ops_per_frame": [f["ops"] for f in runs.summary["frames"]],
        "note": BENCH_NOTE,
        "timing": {
            "t_4d_s": t_4d,
            "per_frame_s": t_4d / frames,
            "fps": frames / t_4d,
            "cumulative_timestamp_s": np.median(np.asarray(cumulative), axis=0).tolist(),
            "runs_s": totals,
        },
    }
    return report


# --------------------------------------------------------------------------
# command-level helpers (used by the CLI)


def run_synth(out, scene_cfg: dict | None = None, seed: int | None = None) -> Path:
    return synthesize(scene_from_config(scene_cfg, seed), out)


def run_reconstruct(m: Manifest, cfg: RunConfig, out, *, masks_only: bool = False) -> Reconstruction:
    r = reconstruct(m, cfg)
    if masks_only:
        write_masks(r, out)
        write_json(Path(out) / "summary.json", r.summary)
        write_json(Path(out) / "timing.json", r.timing)
    else:
        write_reconstruction(r, out)
    return r
