"""Command line pipeline: gen / detect / train / track / eval / render.

Every subcommand is restartable from its on-disk inputs; configuration
comes from one INI-style file with a section per stage (see README for
the full key list).  All randomness is seeded through the config (or the
--seed override), so identical invocations produce byte-identical output
files.
"""

from __future__ import annotations

import argparse
import base64
import configparser
import json
import math
import os
import sys
from dataclasses import dataclass, field, replace

import numpy as np

from . import assign, detector, forest, metrics, raster, segmenter, synth
from .features import Observation

DEFAULT_PATHS = {
    "frames": "frame_*.pgm",
    "frame_template": "frame_{:04d}.pgm",
    "truth": "truth.json",
    "detections": "detections.jsonl",
    "forest": "forest.json",
    "tracks": "tracks.csv",
    "report": "report.json",
    "report_frames": "report_frames.csv",
    "render": "render.svg",
    "pairs": "pairs.txt",
}


class ConfigError(ValueError):
    """Raised for unreadable, unknown or ill-typed configuration keys."""


@dataclass
class PipelineConfig:
    scene: synth.SceneConfig
    detector: detector.DetectorConfig
    evolve: segmenter.EvolveParams
    assign: assign.AssignParams
    rays: int = 16
    bins: int = 16
    n_trees: int = 50
    forest_seed: int = 0
    n_positives: int = 100
    match_threshold: float = 18.0
    paths: dict = field(default_factory=lambda: dict(DEFAULT_PATHS))


def load_config(path: str) -> PipelineConfig:
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise ConfigError(f"cannot read config file {path!r}")

    consumed: set[tuple[str, str]] = set()

    def take(section, key, cast, default):
        consumed.add((section, key))
        if not parser.has_option(section, key):
            return default
        text = parser.get(section, key)
        try:
            if cast is bool:
                return parser.getboolean(section, key)
            return cast(text)
        except ValueError:
            raise ConfigError(f"{path}: bad value {text!r} for [{section}] {key}") from None

    scene = synth.SceneConfig(
        width=take("scene", "width", int, 256),
        height=take("scene", "height", int, 256),
        n_objects=take("scene", "n_objects", int, 20),
        frames=take("scene", "frames", int, 60),
        size_mean=(take("scene", "a", float, 9.0), take("scene", "b", float, 5.0)),
        size_jitter=take("scene", "size_jitter", float, 0.8),
        speed_mean=take("scene", "speed_mean", float, 2.0),
        speed_jitter=take("scene", "speed_jitter", float, 0.6),
        turn_sigma=take("scene", "turn_sigma", float, 0.25),
        occlusion_bias=take("scene", "occlusion_bias", float, 0.0),
        texture=take("scene", "texture", str, "dog-profile"),
        noise_sigma=take("scene", "noise_sigma", float, 0.01),
        seed=take("scene", "seed", int, 0),
    )
    det = detector.DetectorConfig(
        nominal_a=take("detector", "a", float, scene.size_mean[0]),
        nominal_b=take("detector", "b", float, scene.size_mean[1]),
        size_range=take("detector", "size_range", int, 2),
        k=take("detector", "k", float, 0.9),
        lambda0=take("detector", "lambda0", float, 0.82),
        tau=take("detector", "tau", float, 0.01),
        iterations=take("detector", "iterations", int, 4),
        n_orientations=take("detector", "orientations", int, 8),
        scan_stride=take("detector", "stride", int, 2),
        nms_iou=take("detector", "nms_iou", float, 0.3),
    )
    evolve = segmenter.EvolveParams(
        dt=take("segmenter", "dt", float, 0.1),
        max_iters=take("segmenter", "max_iters", int, 500),
        reinit_every=take("segmenter", "reinit_every", int, 10),
        rel_tol=take("segmenter", "rel_tol", float, 1e-4),
    )
    gate_default = 6.0 * det.nominal_a  # three object lengths
    assign_params = assign.AssignParams(
        gate_radius=take("assign", "gate_radius", float, gate_default),
        slack_cost=take("assign", "slack_cost", float, 0.5),
        max_gap=take("assign", "max_gap", int, 5),
        gate_radius_per_frame=take("assign", "gate_radius_per_frame", float, None),
        rays=take("features", "rays", int, 16),
        bins=take("features", "bins", int, 16),
    )
    cfg = PipelineConfig(
        scene=scene, detector=det, evolve=evolve, assign=assign_params,
        rays=assign_params.rays, bins=assign_params.bins,
        n_trees=take("forest", "trees", int, 50),
        forest_seed=take("forest", "seed", int, 0),
        n_positives=take("forest", "positives", int, 100),
        match_threshold=take("metrics", "match_threshold", float, 2.0 * det.nominal_a),
    )
    for key, default in DEFAULT_PATHS.items():
        cfg.paths[key] = take("io", key, str, default)
    for section in parser.sections():
        for key in parser.options(section):
            if (section, key) not in consumed:
                raise ConfigError(f"{path}: unknown config key [{section}] {key}")
    return cfg


def _path(cfg: PipelineConfig, out: str, key: str) -> str:
    return os.path.join(out, cfg.paths[key])


def cmd_gen(cfg: PipelineConfig, out: str, seed: int | None = None) -> None:
    scene = cfg.scene if seed is None else replace(cfg.scene, seed=seed)
    frames, truth = synth.generate(scene)
    os.makedirs(out, exist_ok=True)
    for i, frame in enumerate(frames):
        raster.write_pgm(frame, os.path.join(out, cfg.paths["frame_template"].format(i)))
    synth.save_truth(truth, _path(cfg, out, "truth"))
    print(f"gen: wrote {len(frames)} frames and ground truth to {out}")


def cmd_detect(cfg: PipelineConfig, out: str, threads: int = 1) -> None:
    frames = raster.load_sequence(_path(cfg, out, "frames"))
    cfg.detector.validate()

    def segment(img, det):
        mask, _ = segmenter.segment_detection(img, det, cfg.detector.k, cfg.evolve)
        return mask

    bank = None
    count = 0
    with open(_path(cfg, out, "detections"), "w", encoding="ascii") as fh:
        for idx, frame in enumerate(frames):
            if bank is None or bank.shape != frame.data.shape:
                bank = detector._CorrelationBank(cfg.detector, frame.data.shape)
            results = detector.detect_iterative(frame, cfg.detector, segment,
                                                frame=idx, threads=threads,
                                                _bank=bank)
            for det, segmask in results:
                fh.write(json.dumps(detection_record(det, segmask)) + "\n")
                count += 1
    print(f"detect: {count} detections across {len(frames)} frames")


def detection_record(det: detector.Detection, segmask=None) -> dict:
    rec = {"frame": det.frame, "cx": det.center[0], "cy": det.center[1],
           "a": det.half_extents[0], "b": det.half_extents[1],
           "theta": det.orientation, "fit": det.fit}
    if segmask is not None:
        rec["mask"] = {"shape": list(segmask.mask.shape),
                       "runs": raster.mask_to_rle(segmask.mask)}
    return rec


def load_detections(path: str, n_frames: int | None = None):
    """Detections JSONL -> per-frame lists of (Detection, SegmentMask|None)."""
    frames: dict[int, list] = {}
    with open(path, encoding="ascii") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            det = detector.Detection((rec["cx"], rec["cy"]), (rec["a"], rec["b"]),
                                     rec["theta"], rec["fit"], rec["frame"])
            segmask = None
            if "mask" in rec:
                grid = raster.rle_to_mask(rec["mask"]["runs"],
                                          tuple(rec["mask"]["shape"]))
                segmask = segmenter.mask_stats(grid)
            frames.setdefault(det.frame, []).append((det, segmask))
    last = max(frames) + 1 if frames else 0
    count = n_frames if n_frames is not None else last
    return [frames.get(i, []) for i in range(count)]


def build_observations(cfg: PipelineConfig, frames, detections):
    """Re-extract patches and pair them with stored detections/masks."""
    out = []
    for img, dets in zip(frames, detections):
        row = []
        for det, segmask in dets:
            patch = raster.extract_patch(img, det.center, det.half_extents,
                                         det.orientation)
            if segmask is None:
                segmask = segmenter.mask_stats(np.ones(patch.data.data.shape, bool))
            row.append(Observation(det, segmask, patch))
        out.append(row)
    return out


def _positive_pairs_from_truth(cfg: PipelineConfig, truth, detections):
    """Match truth states to detections by center and emit id-consistent pairs."""
    tol = max(3.0, cfg.detector.nominal_b)
    matched = []  # per frame: truth id -> detection index
    for frame_states, dets in zip(truth.states, detections):
        table = {}
        for st in frame_states:
            if not st.visible:
                continue
            best, best_d = -1, tol
            for i, (det, _) in enumerate(dets):
                d = math.dist(st.center, det.center)
                if d <= best_d:
                    best, best_d = i, d
            if best >= 0:
                table[st.id] = best
        matched.append(table)
    pairs = []
    for f in range(len(matched) - 1):
        for oid, i in sorted(matched[f].items()):
            if oid in matched[f + 1]:
                pairs.append((f, i, f + 1, matched[f + 1][oid]))
    return pairs


def cmd_train(cfg: PipelineConfig, out: str, from_truth: bool = False,
              pairs_file: str | None = None, seed: int | None = None) -> None:
    frames = raster.load_sequence(_path(cfg, out, "frames"))
    detections = load_detections(_path(cfg, out, "detections"), len(frames))
    if from_truth:
        truth = synth.load_truth(_path(cfg, out, "truth"))
        pairs = _positive_pairs_from_truth(cfg, truth, detections)
    else:
        pairs_path = pairs_file or _path(cfg, out, "pairs")
        pairs = []
        with open(pairs_path, encoding="ascii") as fh:
            for ln, line in enumerate(fh, 1):
                parts = line.replace(",", " ").split()
                if not parts or parts[0].startswith("#"):
                    continue
                if len(parts) != 4:
                    raise ConfigError(f"{pairs_path}:{ln}: expected 4 fields, got {len(parts)}")
                pairs.append(tuple(int(p) for p in parts))
    rng_seed = cfg.forest_seed if seed is None else seed
    if len(pairs) > cfg.n_positives:
        keep = np.random.default_rng(rng_seed).choice(len(pairs), cfg.n_positives,
                                                      replace=False)
        pairs = [pairs[i] for i in sorted(keep)]
    observations = build_observations(cfg, frames, detections)
    samples = forest.build_training_samples(observations, pairs,
                                            cfg.assign.gate_radius, rng_seed,
                                            cfg.rays, cfg.bins)
    model = forest.train(samples, cfg.n_trees, rng_seed)
    forest.save_forest(model, _path(cfg, out, "forest"))
    n_pos = sum(s.label for s in samples)
    print(f"train: {n_pos} positive / {len(samples) - n_pos} negative samples, "
          f"oob_accuracy={model.oob_accuracy:.4f}")


def cmd_track(cfg: PipelineConfig, out: str, link: bool = True,
              solver: str = "lap") -> None:
    frames = raster.load_sequence(_path(cfg, out, "frames"))
    detections = load_detections(_path(cfg, out, "detections"), len(frames))
    observations = build_observations(cfg, frames, detections)
    model = forest.load_forest(_path(cfg, out, "forest"))
    tracklets = assign.track_frames(observations, model, cfg.assign, solver=solver)
    if link:
        tracklets = assign.link_tracklets(tracklets, model, cfg.assign)
    assign.write_tracklets_csv(tracklets, _path(cfg, out, "tracks"))
    n_states = sum(len(t.states) for t in tracklets)
    print(f"track: {len(tracklets)} trajectories, {n_states} states")


def cmd_eval(cfg: PipelineConfig, out: str) -> None:
    truth_path = _path(cfg, out, "truth")
    truth = synth.load_truth(truth_path)
    detections = load_detections(_path(cfg, out, "detections"), truth.n_frames)
    for dets in detections:
        for det, _ in dets:
            if not (0 <= det.center[0] < truth.width and 0 <= det.center[1] < truth.height):
                raise ConfigError(
                    f"{truth_path}: truth dimensions {truth.width}x{truth.height} "
                    f"do not contain detection at {det.center}")
    tp = fp = fn = 0
    for f in range(truth.n_frames):
        pred = np.zeros((truth.height, truth.width), dtype=bool)
        for det, segmask in detections[f]:
            if segmask is not None:
                pts = segmenter.mask_frame_pixels(segmask, det,
                                                  (truth.height, truth.width))
                pred[pts[:, 1], pts[:, 0]] = True
        actual = truth.frame_mask(f, visible_only=True)
        tp += int((pred & actual).sum())
        fp += int((pred & ~actual).sum())
        fn += int((~pred & actual).sum())
    voc = 1.0 if tp + fp + fn == 0 else tp / (tp + fp + fn)
    hypotheses = assign.read_track_points(_path(cfg, out, "tracks"))
    report = metrics.clear_mot(hypotheses, truth.tracks(), cfg.match_threshold)
    doc = {"voc": voc, "mota": report.mota, "motp": report.motp,
           "motp_per_match": report.motp_per_match, "misses": report.misses,
           "false_positives": report.false_positives,
           "mismatches": report.mismatches, "ground_truth": report.ground_truth,
           "matches": report.matches}
    with open(_path(cfg, out, "report"), "w", encoding="ascii") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")
    with open(_path(cfg, out, "report_frames"), "w", encoding="ascii") as fh:
        fh.write("frame,g,matches,m,fp,mme,dist\n")
        for row in report.per_frame:
            fh.write(f"{row['frame']},{row['g']},{row['matches']},{row['m']},"
                     f"{row['fp']},{row['mme']},{row['dist']:.6f}\n")
    print(f"eval: VOC={voc:.4f} MOTA={report.mota:.4f} MOTP={report.motp:.4f} "
          f"(per-match {report.motp_per_match:.4f})")


def _svg_color(track_id: int) -> str:
    hue = (track_id * 137.508) % 360.0
    return f"hsl({hue:.1f}, 90%, 45%)"


def cmd_render(cfg: PipelineConfig, out: str) -> None:
    frame_paths = sorted(__import__("glob").glob(_path(cfg, out, "frames")))
    if not frame_paths:
        raise ConfigError(f"no frames matched {_path(cfg, out, 'frames')!r}")
    last = raster.load_image(frame_paths[-1])
    h, w = last.data.shape
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" '
             f'width="{w}" height="{h}" viewBox="0 0 {w} {h}">']
    parts.append(_svg_background(last))
    tracks_path = _path(cfg, out, "tracks")
    states: dict[int, list] = {}
    import csv as _csv
    with open(tracks_path, newline="") as fh:
        for row in _csv.DictReader(fh):
            states.setdefault(int(row["track_id"]), []).append(
                (int(row["frame"]), float(row["cx"]), float(row["cy"]),
                 row["is_dummy"] == "1"))
    for tid in sorted(states):
        rows = sorted(states[tid])
        color = _svg_color(tid)
        for (f0, x0, y0, d0), (f1, x1, y1, d1) in zip(rows, rows[1:]):
            dash = ' stroke-dasharray="3,2"' if (d0 or d1) else ""
            parts.append(f'<line x1="{x0:.2f}" y1="{y0:.2f}" x2="{x1:.2f}" '
                         f'y2="{y1:.2f}" stroke="{color}" stroke-width="1"{dash}/>')
        parts.append(f'<circle cx="{rows[0][1]:.2f}" cy="{rows[0][2]:.2f}" r="1.6" '
                     f'fill="{color}"/>')
    parts.append("</svg>")
    with open(_path(cfg, out, "render"), "w", encoding="ascii") as fh:
        fh.write("\n".join(parts) + "\n")
    print(f"render: wrote {_path(cfg, out, 'render')}")


def _svg_background(image: raster.GrayImage) -> str:
    h, w = image.data.shape
    try:
        from PIL import Image
        import io
        buf = io.BytesIO()
        Image.fromarray((image.data * 255).astype(np.uint8), mode="L").save(buf, "PNG")
        b64 = base64.b64encode(buf.getvalue()).decode("ascii")
        return (f'<image x="0" y="0" width="{w}" height="{h}" '
                f'xlink:href="data:image/png;base64,{b64}" '
                f'xmlns:xlink="http://www.w3.org/1999/xlink"/>')
    except ImportError:
        return f'<rect x="0" y="0" width="{w}" height="{h}" fill="#222"/>'


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="ovaltrack",
        description="Detect, segment and track crowded oval objects in image sequences.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in [
            ("gen", "generate a synthetic scene (frames + ground truth)"),
            ("detect", "detect and segment objects in the frame sequence"),
            ("train", "train the assignment forest from labeled pairs"),
            ("track", "run two-stage tracking over stored detections"),
            ("eval", "score detections and trajectories against ground truth"),
            ("render", "write an SVG overlay of the trajectories")]:
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", required=True, help="INI configuration file")
        p.add_argument("--out", default=".", help="working directory for artifacts")
        if name in ("gen", "train"):
            p.add_argument("--seed", type=int, default=None, help="seed override")
        if name == "detect":
            p.add_argument("--threads", type=int, default=1,
                           help="worker threads for per-detection segmentation")
        if name == "train":
            p.add_argument("--from-truth", action="store_true",
                           help="derive positive pairs from the ground truth file")
            p.add_argument("--pairs", default=None,
                           help="positive-pair file (frame id frame+1 id per line)")
        if name == "track":
            p.add_argument("--no-link", action="store_true",
                           help="skip the tracklet-linking second stage")
            p.add_argument("--solver", choices=("lap", "greedy"), default="lap")
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.command == "gen":
            cmd_gen(cfg, args.out, args.seed)
        elif args.command == "detect":
            cmd_detect(cfg, args.out, args.threads)
        elif args.command == "train":
            cmd_train(cfg, args.out, args.from_truth, args.pairs, args.seed)
        elif args.command == "track":
            cmd_track(cfg, args.out, link=not args.no_link, solver=args.solver)
        elif args.command == "eval":
            cmd_eval(cfg, args.out)
        elif args.command == "render":
            cmd_render(cfg, args.out)
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"ovaltrack {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
