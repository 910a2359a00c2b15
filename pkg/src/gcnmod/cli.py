"""Command-line pipeline: synth, features, graph, train, evaluate, report.

Every stage reads one INI config (see the README for the full key reference),
writes its artifacts under the configured output directory, and records a
manifest with the config hash so later stages and reruns can trust or reuse
them. All randomness descends from the single base seed.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import hashlib
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy

from . import background, features, gcn, graph, media, protocol
from .seeding import derive_seed

_VERSION = "0.1.0"


class CliError(Exception):
    pass


@dataclass(eq=False)
class RunConfig:
    manifest_path: Path
    out_dir: Path
    layout: features.FeatureLayout
    median_max_samples: int
    median_stride: int | None
    k: int
    train: gcn.TrainConfig
    partitions: list[dict]          # [{"id": str, "unseen": [video ids]}]
    densities: list[float]
    repetitions: int
    seed: int

    def semantic_hash(self) -> str:
        """Hash of everything that determines the outputs, incl. the dataset."""
        payload = {
            "dataset": hashlib.sha256(self.manifest_path.read_bytes()).hexdigest(),
            "layout": {
                "flow_magnitude_bins": self.layout.flow_magnitude_bins,
                "flow_orientation_bins": self.layout.flow_orientation_bins,
                "lbp_bins": self.layout.lbp_bins,
                "intensity_bins": self.layout.intensity_bins,
                "flow_magnitude_max": self.layout.flow_magnitude_max,
                "flow_window": self.layout.flow_window,
            },
            "median": [self.median_max_samples, self.median_stride],
            "k": self.k,
            "train": {
                "learning_rate": self.train.learning_rate,
                "weight_decay": self.train.weight_decay,
                "dropout": self.train.dropout,
                "max_epochs": self.train.max_epochs,
                "early_stop_window": self.train.early_stop_window,
                "hidden": self.train.hidden,
            },
            "partitions": self.partitions,
            "densities": self.densities,
            "repetitions": self.repetitions,
            "seed": self.seed,
        }
        return hashlib.sha256(
            json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()

    def runs(self) -> list[tuple[str, float, int]]:
        return [(str(p["id"]), density, rep)
                for p in self.partitions
                for density in self.densities
                for rep in range(self.repetitions)]

    def run_dir(self, partition_id: str, density: float, rep: int) -> Path:
        return self.out_dir / "runs" / f"p{partition_id}_d{density!r}_r{rep}"


def load_config(path, seed_override: int | None = None) -> RunConfig:
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise CliError(f"cannot read config file {path}")
    root = Path(path).resolve().parent

    def get(section, key, fallback=None):
        return parser.get(section, key, fallback=fallback)

    manifest = get("dataset", "manifest")
    if manifest is None:
        raise CliError("config is missing [dataset] manifest")
    manifest_path = (root / manifest).resolve()
    if not manifest_path.is_file():
        raise CliError(f"dataset manifest not found: {manifest_path}")
    out_dir = (root / get("output", "dir", fallback="out")).resolve()

    layout = features.FeatureLayout(
        flow_magnitude_bins=parser.getint("features", "flow_magnitude_bins", fallback=32),
        flow_orientation_bins=parser.getint("features", "flow_orientation_bins", fallback=32),
        lbp_bins=parser.getint("features", "lbp_bins", fallback=256),
        intensity_bins=parser.getint("features", "intensity_bins", fallback=64),
        flow_magnitude_max=parser.getfloat("features", "flow_magnitude_max", fallback=16.0),
        flow_window=parser.getint("features", "flow_window", fallback=5),
    )
    stride_raw = get("features", "median_stride", fallback="auto")
    median_stride = None if stride_raw in (None, "", "auto") else int(stride_raw)

    seed = seed_override if seed_override is not None else \
        parser.getint("protocol", "seed", fallback=0)
    train = gcn.TrainConfig(
        learning_rate=parser.getfloat("train", "learning_rate", fallback=0.01),
        weight_decay=parser.getfloat("train", "weight_decay", fallback=5e-4),
        dropout=parser.getfloat("train", "dropout", fallback=0.5),
        max_epochs=parser.getint("train", "max_epochs", fallback=600),
        early_stop_window=parser.getint("train", "early_stop_window", fallback=10),
        hidden=parser.getint("train", "hidden", fallback=16),
        seed=seed,
    )

    partitions_file = get("protocol", "partitions")
    unseen_inline = get("protocol", "unseen")
    if partitions_file:
        partitions = json.loads((root / partitions_file).read_text())
        partitions = [{"id": str(p["id"]), "unseen": list(p["unseen"])}
                      for p in partitions]
    elif unseen_inline:
        unseen = [v.strip() for v in unseen_inline.split(",") if v.strip()]
        partitions = [{"id": "0", "unseen": unseen}]
    else:
        raise CliError("config needs [protocol] unseen=... or partitions=<file>")

    densities = [float(v) for v in
                 get("protocol", "densities", fallback="0.1").split(",") if v.strip()]
    repetitions = parser.getint("protocol", "repetitions", fallback=3)
    if repetitions < 1:
        raise CliError("repetitions must be >= 1")
    return RunConfig(
        manifest_path=manifest_path, out_dir=out_dir, layout=layout,
        median_max_samples=parser.getint("features", "median_max_samples", fallback=150),
        median_stride=median_stride, k=parser.getint("graph", "k", fallback=30),
        train=train, partitions=partitions, densities=densities,
        repetitions=repetitions, seed=seed)


def _write_stage_manifest(cfg: RunConfig, stage: str, extra: dict | None = None) -> None:
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "stage": stage,
        "config_hash": cfg.semantic_hash(),
        "seed": cfg.seed,
        "versions": {
            "gcnmod": _VERSION,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": ".".join(str(v) for v in sys.version_info[:3]),
        },
    }
    if extra:
        payload.update(extra)
    (cfg.out_dir / f"manifest_{stage}.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _stage_is_current(cfg: RunConfig, stage: str, artifacts) -> bool:
    manifest = cfg.out_dir / f"manifest_{stage}.json"
    if not manifest.is_file() or not all(Path(a).exists() for a in artifacts):
        return False
    try:
        recorded = json.loads(manifest.read_text())
    except json.JSONDecodeError:
        return False
    return recorded.get("config_hash") == cfg.semantic_hash()


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    data = json.loads(Path(args.spec).read_text())
    video_specs = data["videos"] if isinstance(data, dict) and "videos" in data else [data]
    specs = [media.SyntheticSpec.from_dict(v) for v in video_specs]
    challenge = data.get("challenge", "synthetic") if isinstance(data, dict) else "synthetic"
    if args.dry_run:
        for spec in specs:
            print(f"plan: synth video {spec.video_id} "
                  f"({spec.num_frames} frames, {spec.height}x{spec.width}, seed {spec.seed})")
        return 0
    manifest = media.write_synth_dataset(specs, args.out, challenge=challenge)
    print(f"wrote {len(specs)} synthetic videos, manifest at {manifest}")
    return 0


# ---------------------------------------------------------------------------
# features
# ---------------------------------------------------------------------------

def _validate_instances(instances, height: int, width: int) -> None:
    for inst in instances:
        x, y, w, h = inst.bbox
        if x < 0 or y < 0 or x + w > width or y + h > height:
            raise media.MalformedMaskError(
                f"instance in frame {inst.frame_index}: mask pixel outside frame")


def _load_video(entry: dict):
    vid = entry["id"]
    frames = media.load_sequence(entry["frames"])
    instances = media.load_instances(entry["instances"], video_id=vid)
    _validate_instances(instances, frames[0].height, frames[0].width)
    gts = media.load_ground_truth(entry["gt"], vid) if entry.get("gt") else {}
    return vid, frames, instances, gts


def cmd_features(args) -> int:
    cfg = load_config(args.config, args.seed)
    artifacts = [cfg.out_dir / "features.bin", cfg.out_dir / "catalog.json"]
    if args.dry_run:
        print(f"plan: extract features for {cfg.manifest_path} -> {artifacts[0]}")
        return 0
    if _stage_is_current(cfg, "features", artifacts):
        print("features: cached, nothing to do")
        return 0

    videos = media.load_manifest(cfg.manifest_path)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    bg_dir = cfg.out_dir / "backgrounds"
    bg_dir.mkdir(exist_ok=True)

    bundles = []
    catalog_videos = []
    all_instances = []
    ground_truth = {}
    for entry in videos:
        vid, frames, instances, gts = _load_video(entry)
        if not instances:
            print(f"warning: video {vid} contributes no instances", file=sys.stderr)
        bg = background.median_background(
            frames, max_samples=cfg.median_max_samples,
            stride=cfg.median_stride, video_id=vid)
        background.save_background(bg, bg_dir / f"{vid}.pgm")
        bundles.append((frames, bg, instances))
        all_instances.extend(instances)
        for idx, gt in gts.items():
            ground_truth[(vid, idx)] = gt
        catalog_videos.append({
            "id": vid,
            "challenge": entry.get("challenge", "unknown"),
            "height": frames[0].height,
            "width": frames[0].width,
            "num_frames": len(frames),
            "frames_with_gt": sorted(gts),
        })

    all_instances = media.assign_node_ids(all_instances)
    offset = 0
    renumbered_bundles = []
    for frames, bg, instances in bundles:
        renumbered_bundles.append((frames, bg, all_instances[offset:offset + len(instances)]))
        offset += len(instances)

    labels = protocol.label_nodes(all_instances, ground_truth)
    matrix = features.extract_features(renumbered_bundles, cfg.layout)
    features.save_features(matrix, artifacts[0])

    nodes = []
    per_video_ordinal: dict[str, int] = {}
    for inst in all_instances:
        ordinal = per_video_ordinal.get(inst.video_id, 0)
        per_video_ordinal[inst.video_id] = ordinal + 1
        label = None
        if labels.covered[inst.node_id]:
            label = int(np.argmax(labels.y[inst.node_id]))
        nodes.append({
            "id": inst.node_id,
            "video": inst.video_id,
            "frame": inst.frame_index,
            "ordinal": ordinal,
            "bbox": list(inst.bbox),
            "pixels": len(inst.mask_pixels),
            "label": label,
        })
    catalog = {"videos": catalog_videos, "nodes": nodes}
    (cfg.out_dir / "catalog.json").write_text(
        json.dumps(catalog, indent=2, sort_keys=True) + "\n")
    _write_stage_manifest(cfg, "features", {"num_nodes": len(nodes)})
    print(f"features: {len(nodes)} nodes, C={matrix.dimension}")
    return 0


# ---------------------------------------------------------------------------
# graph
# ---------------------------------------------------------------------------

def cmd_graph(args) -> int:
    cfg = load_config(args.config, args.seed)
    artifact = cfg.out_dir / "graph.bin"
    if args.dry_run:
        print(f"plan: build k={cfg.k} graph from {cfg.out_dir / 'features.bin'}")
        return 0
    if _stage_is_current(cfg, "graph", [artifact]):
        print("graph: cached, nothing to do")
        return 0
    matrix = features.load_features(cfg.out_dir / "features.bin")
    g = graph.build_graph(matrix, k=cfg.k)
    graph.save_graph(g, artifact, k=cfg.k)
    graph.export_edges_text(g, cfg.out_dir / "edges.txt")
    _write_stage_manifest(cfg, "graph", {
        "num_edges": int(len(g.edges)), "rho": g.rho})
    print(f"graph: {g.num_nodes} nodes, {len(g.edges)} undirected edges, rho={g.rho:.6g}")
    return 0


# ---------------------------------------------------------------------------
# train / evaluate / report
# ---------------------------------------------------------------------------

def _load_catalog(cfg: RunConfig) -> dict:
    path = cfg.out_dir / "catalog.json"
    if not path.is_file():
        raise CliError(f"missing {path}; run the features stage first")
    return json.loads(path.read_text())


def _rebuild_instances(cfg: RunConfig, catalog: dict, video_ids) -> list[media.Instance]:
    """Reload instance pixel sets for rendering, mapped back to catalog ids."""
    entries = {v["id"]: v for v in media.load_manifest(cfg.manifest_path)}
    by_video: dict[str, list[dict]] = {}
    for node in catalog["nodes"]:
        by_video.setdefault(node["video"], []).append(node)
    rebuilt = []
    for vid in video_ids:
        rows = sorted(by_video.get(vid, []), key=lambda r: r["ordinal"])
        loaded = media.load_instances(entries[vid]["instances"], video_id=vid)
        if len(loaded) != len(rows):
            raise CliError(
                f"video {vid}: dataset now has {len(loaded)} instances, "
                f"catalog recorded {len(rows)}")
        for row, inst in zip(rows, loaded):
            if inst.frame_index != row["frame"] or len(inst.mask_pixels) != row["pixels"]:
                raise CliError(f"video {vid}: instances changed since cataloguing")
            rebuilt.append(media.Instance(
                video_id=vid, frame_index=inst.frame_index, bbox=inst.bbox,
                mask_pixels=inst.mask_pixels, node_id=row["id"]))
    return rebuilt


def _load_labels(catalog: dict) -> protocol.LabelMatrix:
    nodes = sorted(catalog["nodes"], key=lambda r: r["id"])
    n = len(nodes)
    y = np.zeros((n, gcn.NUM_CLASSES))
    covered = np.zeros(n, dtype=bool)
    for row in nodes:
        if row["label"] is not None:
            y[row["id"], int(row["label"])] = 1.0
            covered[row["id"]] = True
    return protocol.LabelMatrix(y=y, covered=covered)


def _node_videos(catalog: dict) -> list[str]:
    return [row["video"] for row in sorted(catalog["nodes"], key=lambda r: r["id"])]


def _make_split_for(cfg: RunConfig, catalog: dict, labels, partition: dict,
                    density: float, rep: int) -> protocol.SplitSpec:
    rep_seed = derive_seed(cfg.seed, "rep", str(partition["id"]), repr(density), rep)
    return protocol.make_split(_node_videos(catalog), labels.covered,
                               partition["unseen"], density,
                               seed=derive_seed(rep_seed, "split"),
                               partition_id=str(partition["id"]))


def _train_one(cfg: RunConfig, matrix, operator, labels, catalog,
               partition: dict, density: float, rep: int) -> None:
    run_dir = cfg.run_dir(str(partition["id"]), density, rep)
    run_dir.mkdir(parents=True, exist_ok=True)
    split = _make_split_for(cfg, catalog, labels, partition, density, rep)
    split.write_json(run_dir / "split.json")
    rep_seed = derive_seed(cfg.seed, "rep", str(partition["id"]), repr(density), rep)
    config = dataclasses.replace(cfg.train, seed=derive_seed(rep_seed, "train"))
    model, history = gcn.train(matrix.values, operator, labels.y,
                               split.train_nodes, split.val_nodes, config)
    gcn.save_model(model, run_dir / "model.bin")
    history.write_csv(run_dir / "history.csv")


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.seed)
    runs = cfg.runs()
    if args.dry_run:
        for pid, density, rep in runs:
            print(f"plan: train partition {pid}, density {density!r}, repetition {rep}")
        return 0
    catalog = _load_catalog(cfg)
    labels = _load_labels(catalog)
    matrix = features.load_features(cfg.out_dir / "features.bin")
    g = graph.load_graph(cfg.out_dir / "graph.bin")
    operator = graph.normalize(g)
    partitions = {str(p["id"]): p for p in cfg.partitions}

    def one(run):
        pid, density, rep = run
        run_dir = cfg.run_dir(pid, density, rep)
        if (run_dir / "model.bin").is_file() and \
                _stage_is_current(cfg, "train", [run_dir / "model.bin"]):
            return run, None
        try:
            _train_one(cfg, matrix, operator, labels, catalog,
                       partitions[pid], density, rep)
            return run, None
        except Exception as exc:  # noqa: BLE001, keep sweeping other runs
            return run, f"{type(exc).__name__}: {exc}"

    failures = _execute(runs, one, args.jobs)
    _write_stage_manifest(cfg, "train", {"runs": len(runs), "failed": len(failures)})
    return _finish(cfg, "train", runs, failures)


def _evaluate_one(cfg: RunConfig, matrix, operator, catalog,
                  partition: dict, density: float, rep: int) -> None:
    run_dir = cfg.run_dir(str(partition["id"]), density, rep)
    model = gcn.load_model(run_dir / "model.bin")
    classes, _ = gcn.predict(model, matrix.values, operator)

    unseen = list(partition["unseen"])
    instances = _rebuild_instances(cfg, catalog, unseen)
    entries = {v["id"]: v for v in media.load_manifest(cfg.manifest_path)}
    video_meta = {v["id"]: v for v in catalog["videos"]}
    ground_truth = {}
    for vid in unseen:
        for idx, gt in media.load_ground_truth(entries[vid]["gt"], vid).items():
            ground_truth[(vid, idx)] = gt

    experiment = protocol.Experiment(
        features=matrix.values, operator=operator,
        labels=protocol.LabelMatrix(y=np.zeros((0, 2)), covered=np.zeros(0, dtype=bool)),
        instances=instances, ground_truth=ground_truth,
        frame_shapes={vid: (video_meta[vid]["height"], video_meta[vid]["width"])
                      for vid in unseen},
        challenges={vid: video_meta[vid]["challenge"] for vid in unseen},
        unseen_videos=tuple(unseen), density=density,
        train_config=cfg.train, partition_id=str(partition["id"]))
    scores = protocol.evaluate_unseen(experiment, classes)
    payload = [{
        "video": s.video_id, "challenge": s.challenge,
        "tp": s.counts.tp, "fp": s.counts.fp, "fn": s.counts.fn,
        "frames_scored": s.frames_scored,
    } for s in scores]
    (run_dir / "scores.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n")


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config, args.seed)
    runs = cfg.runs()
    if args.dry_run:
        for pid, density, rep in runs:
            print(f"plan: evaluate partition {pid}, density {density!r}, repetition {rep}")
        return 0
    catalog = _load_catalog(cfg)
    matrix = features.load_features(cfg.out_dir / "features.bin")
    g = graph.load_graph(cfg.out_dir / "graph.bin")
    operator = graph.normalize(g)
    partitions = {str(p["id"]): p for p in cfg.partitions}

    def one(run):
        pid, density, rep = run
        try:
            _evaluate_one(cfg, matrix, operator, catalog, partitions[pid], density, rep)
            return run, None
        except Exception as exc:  # noqa: BLE001
            return run, f"{type(exc).__name__}: {exc}"

    failures = _execute(runs, one, args.jobs)
    _write_stage_manifest(cfg, "evaluate", {"runs": len(runs), "failed": len(failures)})
    return _finish(cfg, "evaluate", runs, failures)


def cmd_report(args) -> int:
    cfg = load_config(args.config, args.seed)
    if args.dry_run:
        print(f"plan: aggregate {len(cfg.runs())} runs into {cfg.out_dir}")
        return 0
    summaries = {}
    for partition in cfg.partitions:
        pid = str(partition["id"])
        for density in cfg.densities:
            reports = []
            for rep in range(cfg.repetitions):
                path = cfg.run_dir(pid, density, rep) / "scores.json"
                if not path.is_file():
                    raise CliError(f"missing {path}; run evaluate first")
                rows = json.loads(path.read_text())
                reports.append([
                    protocol.VideoScore(
                        video_id=r["video"], challenge=r["challenge"],
                        counts=protocol.MaskScore(r["tp"], r["fp"], r["fn"]),
                        frames_scored=r["frames_scored"])
                    for r in rows])
            report = protocol.EvalReport(partition_id=pid, density=density,
                                         repetition_scores=reports)
            stem = f"report_p{pid}_d{density!r}"
            report.write_csv(cfg.out_dir / f"{stem}.csv")
            summaries[f"p{pid}_d{density!r}"] = report.summary()
    (cfg.out_dir / "summary.json").write_text(
        json.dumps(summaries, indent=2, sort_keys=True) + "\n")
    print(f"report: wrote summary for {len(summaries)} (partition, density) pairs")
    return 0


def _execute(runs, fn, jobs: int):
    failures = {}
    if jobs and jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            for run, error in pool.map(fn, runs):
                if error:
                    failures["p{0}_d{1!r}_r{2}".format(*run)] = error
    else:
        for run in runs:
            _, error = fn(run)
            if error:
                failures["p{0}_d{1!r}_r{2}".format(*run)] = error
    return failures


def _finish(cfg: RunConfig, stage: str, runs, failures) -> int:
    if failures:
        (cfg.out_dir / "failures.json").write_text(
            json.dumps({"stage": stage, "failures": failures},
                       indent=2, sort_keys=True) + "\n")
        print(f"{stage}: {len(failures)}/{len(runs)} runs failed, "
              f"see failures.json", file=sys.stderr)
        return 1
    print(f"{stage}: {len(runs)} runs complete")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gcnmod",
        description="Moving object detection by node classification on instance graphs")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the base seed from the config")
    parser.add_argument("--jobs", type=int, default=1,
                        help="parallel (partition, density, repetition) runs")
    parser.add_argument("--dry-run", action="store_true",
                        help="print the plan without writing anything")
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="render a synthetic labelled dataset")
    p_synth.add_argument("--spec", required=True, help="synthetic spec JSON")
    p_synth.add_argument("--out", required=True, help="dataset output directory")
    p_synth.set_defaults(fn=cmd_synth)

    for name, fn, text in (
            ("features", cmd_features, "extract per-node descriptors"),
            ("graph", cmd_graph, "build the k-NN graph"),
            ("train", cmd_train, "train one network per run"),
            ("evaluate", cmd_evaluate, "score unseen videos per run"),
            ("report", cmd_report, "aggregate run scores")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, help="INI run configuration")
        p.set_defaults(fn=fn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (CliError, media.MediaError, graph.GraphError, gcn.GcnError,
            protocol.ProtocolError, features.FeatureError, configparser.Error,
            json.JSONDecodeError, OSError, KeyError, TypeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
