"""Single-entry CLI orchestrating the full pipeline from config files.

Subcommands: phantom, prepare, train, score, evaluate, explain, sweep.
Configs are JSON or TOML; relative paths resolve against the config file's
directory. Exit codes: 0 success, 2 config error, 3 data error, 4 numeric
divergence. The environment variable ``RECONSCAN_SEED`` overrides the
config seed. ``--strict-paper`` switches the documented lenient defaults
(ties classify as inliers; thresholds aggregate per scan) to the strict
alternatives (ties are outliers; thresholds aggregate per subject).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import dataclass, field, fields as dataclass_fields, replace
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

import torch

from . import data_pipeline as dp
from . import evaluation as ev
from . import explain as xp
from . import models as md
from . import phantom as ph
from . import scoring as sc
from . import training as tr
from .errors import ConfigError, EmptyDataError, ReconscanError

DEFAULT_WINDOW_LENGTHS = (3, 5)


@dataclass
class RunConfig:
    seed: int = 0
    planes: list[dp.Plane] = field(default_factory=lambda: [dp.Plane.AXIAL])
    paths: dict = field(default_factory=dict)
    slice_range: tuple[int, int] = dp.DEFAULT_SLICE_RANGE
    window: dict = field(default_factory=lambda: {"in_len": 3, "out_len": 3, "stride": 1})
    split: dict = field(default_factory=lambda: {"n_test_healthy": 1})
    model: dict = field(default_factory=lambda: {"kind": "sagan33"})
    train: dict = field(default_factory=dict)
    metric: sc.DistanceMetric = sc.DistanceMetric.L2_PLUS_COSINE
    threshold: dict = field(default_factory=lambda: {"kind": "avg", "unit": "scan"})
    fusion: ev.FusionRule = ev.FusionRule.MEAN
    phantom: dict = field(default_factory=dict)
    explain: dict = field(default_factory=dict)
    sweep: dict = field(default_factory=dict)
    # runtime switches (flags, not config-file keys)
    strict_paper: bool = False
    allow_any_window: bool = False
    base_dir: Path = Path(".")

    @property
    def ties_outlier(self) -> bool:
        return self.strict_paper

    @property
    def threshold_unit(self) -> str:
        if self.strict_paper:
            return "subject"
        return self.threshold.get("unit", "scan")

    def path(self, key: str, default: str | None = None) -> Path:
        value = self.paths.get(key, default)
        if value is None:
            raise ConfigError(f"config paths.{key} is required for this command")
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    def window_lengths(self) -> tuple[int, int, int]:
        in_len = int(self.window.get("in_len", 3))
        out_len = int(self.window.get("out_len", 3))
        stride = int(self.window.get("stride", 1))
        if not self.allow_any_window:
            for value in (in_len, out_len):
                if value not in DEFAULT_WINDOW_LENGTHS:
                    raise ConfigError(
                        f"window lengths default to {DEFAULT_WINDOW_LENGTHS}; pass "
                        f"--allow-any-window to use {value}"
                    )
        return in_len, out_len, stride

    def split_config(self) -> dp.SplitConfig:
        in_len, out_len, stride = self.window_lengths()
        test_subjects = self.split.get("test_subjects")
        return dp.SplitConfig(
            slice_lo=int(self.slice_range[0]),
            slice_hi=int(self.slice_range[1]),
            in_len=in_len,
            out_len=out_len,
            stride=stride,
            n_test_healthy=int(self.split.get("n_test_healthy", 1)),
            test_subjects=tuple(test_subjects) if test_subjects else None,
            seed=self.seed,
        )

    def train_config(self) -> tr.TrainConfig:
        allowed = {f.name for f in dataclass_fields(tr.TrainConfig)}
        unknown = set(self.train) - allowed
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        values = dict(self.train)
        values.setdefault("seed", self.seed)
        return tr.TrainConfig(**values)

    def model_spec(self, height: int, width: int, in_len: int, out_len: int) -> md.ModelSpec:
        kind = md.ModelKind(self.model.get("kind", "sagan33"))
        return md.make_spec(
            kind,
            height,
            width,
            in_channels=in_len,
            out_channels=out_len,
            base_width=self.model.get("base_width"),
            dropout=float(self.model.get("dropout", 0.5)),
            sa_generator=tuple(self.model["sa_generator"])
            if self.model.get("sa_generator")
            else None,
            sa_critic=tuple(self.model["sa_critic"])
            if self.model.get("sa_critic")
            else None,
        )


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"no such config file: {path}")
    try:
        if path.suffix.lower() == ".toml":
            data = tomllib.loads(path.read_text())
        else:
            data = json.loads(path.read_text())
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"{path}: cannot parse config ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a table/object")
    return config_from_dict(data, base_dir=path.parent)


def config_from_dict(data: dict, base_dir=Path(".")) -> RunConfig:
    cfg = RunConfig(base_dir=Path(base_dir))
    try:
        if "seed" in data:
            cfg.seed = int(data["seed"])
        planes = data.get("planes", data.get("plane"))
        if planes is not None:
            if isinstance(planes, str):
                planes = [planes]
            cfg.planes = [dp.Plane(p) for p in planes]
        if "slice_range" in data:
            lo, hi = data["slice_range"]
            cfg.slice_range = (int(lo), int(hi))
        for key in ("paths", "window", "split", "model", "train", "threshold",
                    "phantom", "explain", "sweep"):
            if key in data:
                if not isinstance(data[key], dict):
                    raise ConfigError(f"config section {key!r} must be a table")
                setattr(cfg, key, data[key])
        if "metric" in data:
            cfg.metric = sc.DistanceMetric(data["metric"])
        if "fusion" in data:
            cfg.fusion = ev.FusionRule(data["fusion"])
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(f"bad config value: {exc}") from exc
    return cfg


def _resolved_seed(cfg: RunConfig) -> int:
    env = os.environ.get("RECONSCAN_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"RECONSCAN_SEED must be an integer, got {env!r}") from exc
    return cfg.seed


def run_phantom(cfg: RunConfig) -> dict:
    """Generate the labeled phantom cohort plus its manifest."""
    allowed = {f.name for f in dataclass_fields(ph.CohortConfig)}
    unknown = set(cfg.phantom) - allowed
    if unknown:
        raise ConfigError(f"unknown phantom config keys: {sorted(unknown)}")
    values = dict(cfg.phantom)
    if "anomaly_kind" in values:
        values["anomaly_kind"] = ph.AnomalyKind(values["anomaly_kind"])
    if "magnitude_range" in values:
        values["magnitude_range"] = tuple(values["magnitude_range"])
    values.setdefault("seed", cfg.seed)
    cohort = ph.CohortConfig(**values)
    out_dir = cfg.path("data_dir")
    manifest = ph.generate_cohort(cohort, out_dir)
    summary = {
        "manifest": str(manifest),
        "n_scans": (cohort.n_train_healthy + cohort.n_test_healthy + cohort.n_test_anomalous)
        * cohort.scans_per_subject,
    }
    print(f"wrote {summary['n_scans']} phantom scans; manifest at {manifest}")
    return summary


def _load_volumes(cfg: RunConfig) -> list[dp.Volume]:
    manifest = cfg.path("manifest", None)
    entries = dp.read_scan_manifest(manifest)
    return [dp.load_volume(path, meta) for path, meta in entries]


def run_prepare(cfg: RunConfig) -> dict:
    """Extract windows per plane and write subject-disjoint split archives."""
    volumes = _load_volumes(cfg)
    out_dir = cfg.path("windows_dir")
    manifests = {}
    for plane in cfg.planes:
        split = dp.make_split(volumes, plane, cfg.split_config())
        manifest = dp.write_split(out_dir, split, plane)
        manifests[plane.value] = manifest
        print(f"[{plane.value}] windows per scan:")
        for scan, count in sorted(manifest["per_scan_windows"].items()):
            print(f"  {scan}: {count}")
        print(
            f"[{plane.value}] train scans={manifest['n_train_scans']} "
            f"test scans={manifest['n_test_scans']}"
        )
    return manifests


def _archive_paths(cfg: RunConfig, plane: dp.Plane) -> tuple[Path, Path]:
    windows_dir = cfg.path("windows_dir")
    return (
        windows_dir / f"train_{plane.value}.rswa",
        windows_dir / f"test_{plane.value}.rswa",
    )


def run_train(cfg: RunConfig) -> dict:
    """Train the configured model per plane; write checkpoints and histories."""
    checkpoint_dir = cfg.path("checkpoint_dir")
    train_cfg = cfg.train_config()
    results = {}
    for plane in cfg.planes:
        train_path, _ = _archive_paths(cfg, plane)
        pairs, _labels = dp.load_window_archive(train_path)
        if not pairs:
            raise EmptyDataError(f"no training windows in {train_path}")
        height, width, in_len = pairs[0].input.data.shape
        out_len = pairs[0].target.data.shape[2]
        spec = cfg.model_spec(height, width, in_len, out_len)
        split = dp.DatasetSplit(train=pairs, test=[], manifest={})
        started = time.monotonic()
        torch.manual_seed(train_cfg.seed)  # deterministic parameter init
        if spec.kind == md.ModelKind.UNET33:
            model = md.build_unet33(spec)
            trained, history = tr.train_unet(model, split, train_cfg, plane)
        else:
            generator, critic = md.build_model(spec)
            trained, history = tr.train_gan(generator, critic, split, train_cfg, plane)
        elapsed = time.monotonic() - started
        ckpt = checkpoint_dir / f"checkpoint_{plane.value}.pt"
        md.save_checkpoint(ckpt, trained)
        history.to_csv(checkpoint_dir / f"history_{plane.value}.csv")
        results[plane.value] = {
            "checkpoint": str(ckpt),
            "steps": len(history.rows),
            "best_step": history.best_step,
            "seconds": round(elapsed, 2),
        }
        print(
            f"[{plane.value}] trained {spec.kind.value} for {len(history.rows)} "
            f"steps in {elapsed:.1f}s -> {ckpt}"
        )
    return results


def run_score(cfg: RunConfig) -> dict:
    """Score train and test windows; calibrate the threshold from training scores."""
    checkpoint_dir = cfg.path("checkpoint_dir")
    scores_dir = cfg.path("scores_dir")
    scores_dir.mkdir(parents=True, exist_ok=True)
    kind = sc.ThresholdKind(cfg.threshold.get("kind", "avg"))
    results = {}
    for plane in cfg.planes:
        model = md.load_checkpoint(checkpoint_dir / f"checkpoint_{plane.value}.pt")
        train_path, test_path = _archive_paths(cfg, plane)
        outputs = {}
        threshold = None
        for split_name, path in (("train", train_path), ("test", test_path)):
            pairs, labels = dp.load_window_archive(path)
            table = sc.build_score_table(model, pairs, cfg.metric, labels)
            stem = f"scores_{split_name}_{plane.value}"
            table.to_csv(scores_dir / f"{stem}.csv")
            table.to_json(scores_dir / f"{stem}.json")
            outputs[split_name] = str(scores_dir / f"{stem}.json")
            if split_name == "train":
                threshold = sc.compute_threshold(table, kind, unit=cfg.threshold_unit)
                (scores_dir / f"threshold_{plane.value}.json").write_text(
                    json.dumps(threshold.as_dict(), indent=2, sort_keys=True)
                )
        results[plane.value] = {
            "threshold": threshold.value,
            "files": outputs,
        }
        print(
            f"[{plane.value}] {cfg.metric.value} threshold "
            f"({kind.value}/{cfg.threshold_unit}) = {threshold.value:.6g}"
        )
    return results


def _objective_label(cfg: RunConfig) -> str:
    kind = md.ModelKind(cfg.model.get("kind", "sagan33"))
    if kind == md.ModelKind.UNET33:
        return "l2"
    train_cfg = cfg.train_config()
    label = f"wgan-gp+{train_cfg.l1_weight:g}l1"
    if train_cfg.cosine_weight > 0:
        label += "+cosine"
    return label


def run_evaluate(cfg: RunConfig) -> dict:
    """Classify test scans per plane, fuse planes, and render the report."""
    scores_dir = cfg.path("scores_dir")
    report_dir = cfg.path("report_dir")
    report_dir.mkdir(parents=True, exist_ok=True)
    per_plane_means: dict[dp.Plane, dict[str, float]] = {}
    thresholds: dict[dp.Plane, sc.Threshold] = {}
    labels: dict[str, dp.Label] = {}
    for plane in cfg.planes:
        table = sc.ScoreTable.from_json(scores_dir / f"scores_test_{plane.value}.json")
        raw = json.loads((scores_dir / f"threshold_{plane.value}.json").read_text())
        thresholds[plane] = sc.Threshold(
            kind=sc.ThresholdKind(raw["kind"]),
            value=float(raw["value"]),
            provenance=raw["provenance"],
            unit=raw.get("unit", "scan"),
        )
        per_plane_means[plane] = table.scan_means()
        if table.labels:
            labels.update(table.labels)

    report = ev.build_report(
        per_plane_means,
        labels,
        thresholds,
        cfg.fusion,
        ties_outlier=cfg.ties_outlier,
    )
    report.to_json(report_dir / "report.json")
    _write_report_csv(report_dir / "report.csv", report, cfg)
    for name, sub in report.per_plane.items():
        _write_roc_csv(report_dir / f"roc_{name}.csv", sub.roc_points)
    if len(report.per_plane) > 1:
        _write_roc_csv(report_dir / "roc_fused.csv", report.roc_points)
    _print_report(report, cfg)
    return report.as_dict()


def _write_roc_csv(path: Path, points) -> None:
    lines = ["fpr,tpr"] + [f"{x!r},{y!r}" for x, y in points]
    path.write_text("\n".join(lines) + "\n")


def _write_report_csv(path: Path, report: ev.EvalReport, cfg: RunConfig) -> None:
    objective = _objective_label(cfg)
    rows = ["plane,objective,distance,accuracy_percent,auc,tp,tn,fp,fn"]
    for name, sub in sorted(report.per_plane.items()):
        cm = sub.confusion
        rows.append(
            f"{name},{objective},{cfg.metric.value},{sub.accuracy_percent:.2f},"
            f"{sub.auc:.4f},{cm.tp},{cm.tn},{cm.fp},{cm.fn}"
        )
    if len(report.per_plane) > 1:
        cm = report.confusion
        rows.append(
            f"fused({report.fusion_rule}),{objective},{cfg.metric.value},"
            f"{report.accuracy_percent:.2f},{report.auc:.4f},"
            f"{cm.tp},{cm.tn},{cm.fp},{cm.fn}"
        )
    path.write_text("\n".join(rows) + "\n")


def _print_report(report: ev.EvalReport, cfg: RunConfig) -> None:
    objective = _objective_label(cfg)
    print(f"\nobjective={objective} distance={cfg.metric.value}")
    header = f"{'plane':<16} {'accuracy%':>9} {'auc':>6}  {'tp':>3} {'tn':>3} {'fp':>3} {'fn':>3}"
    print(header)
    print("-" * len(header))
    for name, sub in sorted(report.per_plane.items()):
        cm = sub.confusion
        print(
            f"{name:<16} {sub.accuracy_percent:>9.2f} {sub.auc:>6.3f}  "
            f"{cm.tp:>3} {cm.tn:>3} {cm.fp:>3} {cm.fn:>3}"
        )
    if len(report.per_plane) > 1:
        cm = report.confusion
        name = f"fused({report.fusion_rule})"
        print(
            f"{name:<16} {report.accuracy_percent:>9.2f} {report.auc:>6.3f}  "
            f"{cm.tp:>3} {cm.tn:>3} {cm.fp:>3} {cm.fn:>3}"
        )


def run_explain(cfg: RunConfig) -> dict:
    """Write saliency heatmaps and reconstruction grids for a few test windows."""
    checkpoint_dir = cfg.path("checkpoint_dir")
    explain_dir = cfg.path("explain_dir")
    objective = cfg.explain.get("objective", "reconstruction_l2")
    max_windows = int(cfg.explain.get("max_windows", 2))
    outputs = []
    for plane in cfg.planes:
        model = md.load_checkpoint(checkpoint_dir / f"checkpoint_{plane.value}.pt")
        if "layer" in cfg.explain:
            layers = [cfg.explain["layer"]]
        elif "layers" in cfg.explain:
            layers = list(cfg.explain["layers"])
        else:
            layers = xp.default_layers(model.generator)
        _, test_path = _archive_paths(cfg, plane)
        pairs, _labels = dp.load_window_archive(test_path)
        for pair in pairs[:max_windows]:
            stem = f"{plane.value}_{pair.scan_id}_{pair.input.slice_indices[0]}"
            saliency_paths = []
            for layer in layers:
                smap = xp.grad_cam(model, pair, layer, objective)
                safe_layer = layer.replace(".", "-")
                saliency_path = explain_dir / f"saliency_{stem}_{safe_layer}.png"
                xp.save_saliency(smap, saliency_path)
                saliency_paths.append(str(saliency_path))
            recon = model.reconstruct(pair.input.data)
            grid_path = explain_dir / f"grid_{stem}.png"
            xp.render_grid(
                pair.input,
                pair.target,
                recon,
                ev.psnr(recon, pair.target.data),
                grid_path,
            )
            outputs.append({"saliency": saliency_paths, "grid": str(grid_path)})
    print(f"wrote {len(outputs)} saliency/grid sets to {explain_dir}")
    return {"outputs": outputs}


def run_sweep(cfg: RunConfig) -> dict:
    """Train the plain UNet over input/output slice-count combinations."""
    combos = [tuple(c) for c in cfg.sweep.get("combos", [[3, 3], [3, 5], [5, 3], [5, 5]])]
    plane = cfg.planes[0]
    volumes = _load_volumes(cfg)
    report_dir = cfg.path("report_dir")
    report_dir.mkdir(parents=True, exist_ok=True)
    train_cfg = cfg.train_config()
    if "max_epochs" in cfg.sweep:
        train_cfg.max_epochs = int(cfg.sweep["max_epochs"])
    rows = []
    for in_len, out_len in combos:
        if not cfg.allow_any_window and not {in_len, out_len} <= set(DEFAULT_WINDOW_LENGTHS):
            raise ConfigError(
                f"sweep combo {in_len}-{out_len} outside the default lengths "
                f"{DEFAULT_WINDOW_LENGTHS}; pass --allow-any-window"
            )
        split_cfg = replace(cfg.split_config(), in_len=in_len, out_len=out_len)
        split = dp.make_split(volumes, plane, split_cfg)
        height, width = split.train[0].input.data.shape[:2]
        spec = md.make_spec(
            md.ModelKind.UNET33,
            height,
            width,
            in_channels=in_len,
            out_channels=out_len,
            base_width=cfg.model.get("base_width"),
        )
        started = time.monotonic()
        trained, history = tr.train_unet(md.build_unet33(spec), split, train_cfg, plane)
        train_seconds = time.monotonic() - started
        labels = {s: dp.Label(l) for s, l in split.manifest["scan_labels"].items()}
        train_table = sc.build_score_table(trained, split.train, sc.DistanceMetric.L2, labels)
        threshold = sc.compute_threshold(
            train_table, sc.ThresholdKind.AVG, unit=cfg.threshold_unit
        )
        test_table = sc.build_score_table(trained, split.test, sc.DistanceMetric.L2, labels)
        report = ev.build_report(
            {plane: test_table.scan_means()},
            labels,
            {plane: threshold},
            cfg.fusion,
            ties_outlier=cfg.ties_outlier,
        )
        windows_per_scan = split.manifest["per_scan_windows"]
        rows.append(
            {
                "combo": f"{in_len}-{out_len}",
                "windows_per_scan": max(windows_per_scan.values()),
                "accuracy_percent": report.accuracy_percent,
                "auc": report.auc,
                "train_seconds": round(train_seconds, 2),
                "epochs": len(history.rows),
            }
        )
    (report_dir / "sweep.json").write_text(json.dumps(rows, indent=2, sort_keys=True))
    header = f"{'combo':<6} {'win/scan':>8} {'accuracy%':>9} {'auc':>6} {'epochs':>6} {'sec':>7}"
    print(header)
    print("-" * len(header))
    for row in rows:
        print(
            f"{row['combo']:<6} {row['windows_per_scan']:>8} "
            f"{row['accuracy_percent']:>9.2f} {row['auc']:>6.3f} "
            f"{row['epochs']:>6} {row['train_seconds']:>7.1f}"
        )
    return {"rows": rows}


_COMMANDS = {
    "phantom": run_phantom,
    "prepare": run_prepare,
    "train": run_train,
    "score": run_score,
    "evaluate": run_evaluate,
    "explain": run_explain,
    "sweep": run_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="reconscan",
        description="Reconstruction-based outlier detection for volumetric scans",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in _COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__)
        p.add_argument("--config", required=True, help="JSON or TOML run config")
        p.add_argument(
            "--strict-paper",
            action="store_true",
            help="strict conventions: ties classify as outliers and the "
            "threshold aggregates per subject instead of per scan",
        )
        p.add_argument(
            "--allow-any-window",
            action="store_true",
            help="accept window lengths outside the default {3, 5}",
        )
        p.add_argument("--jobs", type=int, default=None, help="torch thread count")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        cfg.strict_paper = args.strict_paper
        cfg.allow_any_window = args.allow_any_window
        cfg.seed = _resolved_seed(cfg)
        if args.jobs is not None:
            if args.jobs < 1:
                raise ConfigError("--jobs must be >= 1")
            torch.set_num_threads(args.jobs)
        _COMMANDS[args.command](cfg)
    except ReconscanError as exc:
        print(
            json.dumps({"error": exc.code, "message": str(exc)}),
            file=sys.stderr,
        )
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
