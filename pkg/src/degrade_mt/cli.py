"""Command-line entry point: dataset prep, experiment execution, reporting.

Every command is a pure function of (config, disk inputs) under fixed
seeds. Config files are TOML with sections [paths], [taskspace], [train],
[metric], [seed]; every field has a default, so an empty config runs the
desk-scale benchmark. DEGRADE_MT_THREADS caps worker threads.
"""

from __future__ import annotations

import argparse
import csv
import statistics
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import sr_model
from .hrpool import generate_hr_pool, write_hr_pool
from .img import ImagePlane, ImageError, read_image, write_image
from .rebalance import equivalence_oracle
from .taskspace import build_taskset, describe_taskset
from .train import RunRecord, TrainConfig, TrainError, train_multitask_rebalanced, \
    train_multitask_uniform, train_references


class ConfigError(ValueError):
    """Bad experiment configuration file or flags."""


@dataclass(frozen=True)
class ExperimentConfig:
    hr_dir: Path | None = None  # None -> procedurally generated pool
    out_dir: Path = Path("runs")
    pool_count: int = 60
    pool_seed: int = 7
    blur_full: tuple = (0.2, 3.0)
    noise_full: tuple = (0.004, 0.12)
    blur_thresh: float = 1.5
    noise_thresh: float = 0.04
    scale: int = 2
    quality_range: tuple = (60, 95)
    val_count: int = 8
    val_patch: int = 64
    val_images: int = 10
    train: TrainConfig = field(default_factory=TrainConfig)
    seed_base: int = 0
    seed_count: int = 1

    def seeds(self):
        return [self.seed_base + i for i in range(self.seed_count)]


_PATH_KEYS = {"hr_dir", "out_dir", "pool_count", "pool_seed"}
_TASKSPACE_KEYS = {"blur_full", "noise_full", "blur_thresh", "noise_thresh", "scale",
                   "quality_range", "val_count", "val_patch", "val_images"}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"init_seed", "data_seed",
                                                       "ssim_window", "ssim_sigma"}
_METRIC_KEYS = {"ssim_window", "ssim_sigma"}
_SEED_KEYS = {"base", "count"}


def load_config(path=None) -> ExperimentConfig:
    """Parse a TOML config; unknown keys are errors, all fields have defaults."""
    data = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        with open(path, "rb") as fh:
            try:
                data = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from exc

    known_sections = {"paths", "taskspace", "train", "metric", "seed"}
    unknown = set(data) - known_sections
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")

    def section(name, allowed):
        sub = data.get(name, {})
        bad = set(sub) - allowed
        if bad:
            raise ConfigError(f"unknown keys in [{name}]: {sorted(bad)}")
        return sub

    paths = section("paths", _PATH_KEYS)
    ts = section("taskspace", _TASKSPACE_KEYS)
    tr = section("train", _TRAIN_KEYS)
    metric = section("metric", _METRIC_KEYS)
    seed = section("seed", _SEED_KEYS)

    cfg = ExperimentConfig(
        hr_dir=Path(paths["hr_dir"]) if "hr_dir" in paths else None,
        out_dir=Path(paths.get("out_dir", "runs")),
        pool_count=int(paths.get("pool_count", 60)),
        pool_seed=int(paths.get("pool_seed", 7)),
        blur_full=tuple(ts.get("blur_full", (0.2, 3.0))),
        noise_full=tuple(ts.get("noise_full", (0.004, 0.12))),
        blur_thresh=float(ts.get("blur_thresh", 1.5)),
        noise_thresh=float(ts.get("noise_thresh", 0.04)),
        scale=int(ts.get("scale", 2)),
        quality_range=tuple(ts.get("quality_range", (60, 95))),
        val_count=int(ts.get("val_count", 8)),
        val_patch=int(ts.get("val_patch", 64)),
        val_images=int(ts.get("val_images", 10)),
        train=TrainConfig(
            **{k: tr[k] for k in tr},
            ssim_window=int(metric.get("ssim_window", 11)),
            ssim_sigma=float(metric.get("ssim_sigma", 1.5)),
        ),
        seed_base=int(seed.get("base", 0)),
        seed_count=int(seed.get("count", 1)),
    )
    if cfg.hr_dir is not None and not cfg.hr_dir.is_dir():
        raise ConfigError(f"hr_dir does not exist: {cfg.hr_dir}")
    return cfg


def _apply_flags(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if getattr(args, "out", None):
        cfg = replace(cfg, out_dir=Path(args.out))
    if getattr(args, "seeds", None):
        cfg = replace(cfg, seed_count=int(args.seeds))
    if getattr(args, "scale", None):
        cfg = replace(cfg, scale=int(args.scale))
    return cfg


def load_hr_pool(cfg: ExperimentConfig):
    """HR images from hr_dir, or the seeded procedural pool when unset."""
    if cfg.hr_dir is None:
        return generate_hr_pool(cfg.pool_count, cfg.pool_seed)
    planes = []
    files = sorted(p for p in cfg.hr_dir.iterdir()
                   if p.suffix.lower() in (".png", ".pgm", ".ppm"))
    for path in files:
        try:
            planes.append(read_image(path))
        except (ImageError, OSError) as exc:
            print(f"warning: skipping {path}: {exc}", file=sys.stderr)
    if not planes:
        raise ConfigError(f"no decodable images in {cfg.hr_dir}")
    return planes


def _split_pool(planes, val_images, seed):
    if val_images >= len(planes):
        raise ConfigError(
            f"val_images {val_images} must be smaller than the pool ({len(planes)})"
        )
    order = np.random.default_rng(np.random.SeedSequence([seed, 101])).permutation(len(planes))
    val = [planes[i] for i in order[:val_images]]
    train = [planes[i] for i in order[val_images:]]
    return train, val


def _build_taskset(cfg: ExperimentConfig, seed: int, planes):
    hr_train, hr_val = _split_pool(planes, cfg.val_images, seed)
    return build_taskset(
        hr_train, hr_val,
        blur_full=cfg.blur_full, noise_full=cfg.noise_full,
        blur_thresh=cfg.blur_thresh, noise_thresh=cfg.noise_thresh,
        scale=cfg.scale, quality_range=cfg.quality_range,
        val_count=cfg.val_count, val_patch=cfg.val_patch, seed=seed,
    )


# ---------------------------------------------------------------------------
# synth

_MANIFEST_HEADER = ("task_id", "task_name", "pair", "blur_sigma", "noise_sigma",
                    "scale", "jpeg_quality", "order", "repeats", "lr_seed",
                    "hr_file", "lr_file")


def cmd_synth(cfg: ExperimentConfig) -> int:
    out = cfg.out_dir / "synth"
    out.mkdir(parents=True, exist_ok=True)
    planes = load_hr_pool(cfg)
    if cfg.hr_dir is None:
        write_hr_pool(cfg.out_dir / "hr_pool", cfg.pool_count, cfg.pool_seed)
    taskset = _build_taskset(cfg, cfg.seed_base, planes)
    (out / "taskset.toml").write_text(describe_taskset(taskset))
    rows = []
    for task in taskset.tasks:
        task_dir = out / f"task{task.id}_{task.name}"
        task_dir.mkdir(exist_ok=True)
        for j, pair in enumerate(task.val_pairs):
            hr_file = task_dir / f"pair{j:03d}_hr.png"
            lr_file = task_dir / f"pair{j:03d}_lr.png"
            write_image(hr_file, pair.hr)
            write_image(lr_file, pair.lr)
            c = pair.config
            rows.append([task.id, task.name, j, repr(c.blur_sigma), repr(c.noise_sigma),
                         c.scale, c.jpeg_quality, "|".join(c.order), c.repeats,
                         pair.lr_seed, hr_file.name, lr_file.name])
    with open(out / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_MANIFEST_HEADER)
        writer.writerows(rows)
    print(f"synth: wrote {2 * len(rows)} images and manifest with {len(rows)} rows to {out}")
    return 0


# ---------------------------------------------------------------------------
# run

def _summary_block(seed, refs, taskset, uniform_rec, rebalanced_rec):
    lines = [f"[seed {seed}]"]
    finals_u = uniform_rec.final_metrics()
    finals_r = rebalanced_rec.final_metrics()
    for task in taskset.tasks:
        name = task.name
        pu, su = finals_u[task.id]
        pr, sr = finals_r[task.id]
        lines.append(f"ref_psnr.{name} = {refs[task.id]:.6f}")
        lines.append(f"uniform.{name}.psnr = {pu:.6f}")
        lines.append(f"uniform.{name}.ssim = {su:.6f}")
        lines.append(f"rebalanced.{name}.psnr = {pr:.6f}")
        lines.append(f"rebalanced.{name}.ssim = {sr:.6f}")
        lines.append(f"delta_vs_uniform.{name}.psnr = {pr - pu:+.6f}")
    lines.append(f"uniform.min_psnr = {uniform_rec.min_final_psnr():.6f}")
    lines.append(f"rebalanced.min_psnr = {rebalanced_rec.min_final_psnr():.6f}")
    lines.append(f"uniform.mean_psnr = {uniform_rec.mean_final_psnr():.6f}")
    lines.append(f"rebalanced.mean_psnr = {rebalanced_rec.mean_final_psnr():.6f}")
    return lines


def cmd_run(cfg: ExperimentConfig) -> int:
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    planes = load_hr_pool(cfg)
    summary = []
    mins_uniform, mins_rebalanced = [], []
    for seed in cfg.seeds():
        seed_dir = cfg.out_dir / f"seed{seed}"
        seed_dir.mkdir(exist_ok=True)
        train_cfg = replace(cfg.train, init_seed=seed, data_seed=seed)
        stage = "taskspace"
        try:
            taskset = _build_taskset(cfg, seed, planes)
            (seed_dir / "taskset.toml").write_text(describe_taskset(taskset))
            stage = "reference"
            ref_nets, refs = train_references(taskset, train_cfg)
            sr_model.save_bundle(
                seed_dir / "reference.ckpt",
                {f"task{t.id}_{t.name}": ref_nets[t.id] for t in taskset.tasks},
            )
            stage = "uniform"
            uniform_net, uniform_rec = train_multitask_uniform(taskset, train_cfg)
            sr_model.save_checkpoint(seed_dir / "uniform.ckpt", uniform_net)
            uniform_rec.to_csv(seed_dir / "uniform.csv")
            stage = "rebalanced"
            reb_net, reb_rec = train_multitask_rebalanced(taskset, refs, train_cfg)
            sr_model.save_checkpoint(seed_dir / "rebalanced.ckpt", reb_net)
            reb_rec.to_csv(seed_dir / "rebalanced.csv")
        except (ValueError, OSError) as exc:
            print(f"error: stage {stage} failed for seed {seed}: {exc}", file=sys.stderr)
            return 1
        summary.extend(_summary_block(seed, refs, taskset, uniform_rec, reb_rec))
        summary.append("")
        mins_uniform.append(uniform_rec.min_final_psnr())
        mins_rebalanced.append(reb_rec.min_final_psnr())
        print(f"seed {seed}: min-task psnr uniform={mins_uniform[-1]:.3f} "
              f"rebalanced={mins_rebalanced[-1]:.3f}")
    if len(cfg.seeds()) > 1:
        summary.append("[aggregate]")
        summary.append(f"seeds = {len(cfg.seeds())}")
        summary.append(f"uniform.min_psnr.mean = {statistics.mean(mins_uniform):.6f}")
        summary.append(f"uniform.min_psnr.stddev = {statistics.pstdev(mins_uniform):.6f}")
        summary.append(f"rebalanced.min_psnr.mean = {statistics.mean(mins_rebalanced):.6f}")
        summary.append(f"rebalanced.min_psnr.stddev = {statistics.pstdev(mins_rebalanced):.6f}")
        summary.append("")
    (cfg.out_dir / "summary.txt").write_text("\n".join(summary))
    print(f"run: wrote {cfg.out_dir / 'summary.txt'}")
    return 0


# ---------------------------------------------------------------------------
# report

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def svg_line_plot(path, title, ylabel, series):
    """Minimal SVG line chart; `series` maps name -> (xs, ys)."""
    width, height = 640, 400
    ml, mr, mt, mb = 60, 150, 40, 40
    xs_all = [x for xs, _ in series.values() for x in xs]
    ys_all = [y for _, ys in series.values() for y in ys]
    x_lo, x_hi = min(xs_all), max(xs_all)
    y_lo, y_hi = min(ys_all), max(ys_all)
    if x_hi - x_lo < 1e-12:
        x_hi = x_lo + 1.0
    if y_hi - y_lo < 1e-12:
        y_lo, y_hi = y_lo - 0.5, y_hi + 0.5

    def sx(x):
        return ml + (x - x_lo) / (x_hi - x_lo) * (width - ml - mr)

    def sy(y):
        return height - mb - (y - y_lo) / (y_hi - y_lo) * (height - mt - mb)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width // 2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
        f'<line x1="{ml}" y1="{height - mb}" x2="{width - mr}" y2="{height - mb}" stroke="black"/>',
        f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{height - mb}" stroke="black"/>',
        f'<text x="{ml - 8}" y="{sy(y_lo):.1f}" text-anchor="end" font-size="10">{y_lo:.4g}</text>',
        f'<text x="{ml - 8}" y="{sy(y_hi):.1f}" text-anchor="end" font-size="10">{y_hi:.4g}</text>',
        f'<text x="{sx(x_lo):.1f}" y="{height - mb + 16}" text-anchor="middle" font-size="10">{x_lo:g}</text>',
        f'<text x="{sx(x_hi):.1f}" y="{height - mb + 16}" text-anchor="middle" font-size="10">{x_hi:g}</text>',
        f'<text x="16" y="{height // 2}" font-size="11" transform="rotate(-90 16 {height // 2})" '
        f'text-anchor="middle">{ylabel}</text>',
    ]
    for i, (name, (xs, ys)) in enumerate(series.items()):
        color = _PALETTE[i % len(_PALETTE)]
        points = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(xs, ys))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{points}"/>')
        ly = mt + 16 * i
        parts.append(f'<line x1="{width - mr + 10}" y1="{ly}" x2="{width - mr + 30}" y2="{ly}" '
                     f'stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{width - mr + 35}" y="{ly + 4}" font-size="11">{name}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts))


def _series_by_task(record: RunRecord, attr):
    series = {}
    for row in record.rows:
        xs, ys = series.setdefault(row.task_name, ([], []))
        xs.append(row.interval)
        ys.append(getattr(row, attr))
    return series


def _text_table(record: RunRecord) -> list:
    header = ("interval", "task", "weight", "quota", "psnr_multi", "post_psnr", "post_ssim")
    data = [header] + [
        (str(r.interval), r.task_name, f"{r.weight:.4f}", str(r.quota),
         f"{r.psnr_multi:.3f}", f"{r.post_psnr:.3f}", f"{r.post_ssim:.4f}")
        for r in record.rows
    ]
    widths = [max(len(row[i]) for row in data) for i in range(len(header))]
    return ["  ".join(cell.rjust(w) for cell, w in zip(row, widths)) for row in data]


def cmd_report(run_dir) -> int:
    run_dir = Path(run_dir)
    csvs = sorted(run_dir.glob("**/uniform.csv")) + sorted(run_dir.glob("**/rebalanced.csv"))
    if not csvs:
        print(f"error: no RunRecord CSVs under {run_dir}", file=sys.stderr)
        return 1
    report_dir = run_dir / "report"
    report_dir.mkdir(exist_ok=True)
    table_lines = []
    for path in csvs:
        try:
            record = RunRecord.from_csv(path)
        except TrainError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
        tag = f"{path.parent.name}_{path.stem}" if path.parent != run_dir else path.stem
        svg_line_plot(report_dir / f"weights_{tag}.svg",
                      f"task weights per interval ({tag})", "weight",
                      _series_by_task(record, "weight"))
        svg_line_plot(report_dir / f"quotas_{tag}.svg",
                      f"sample quotas per interval ({tag})", "quota",
                      _series_by_task(record, "quota"))
        svg_line_plot(report_dir / f"psnr_{tag}.svg",
                      f"post-interval validation PSNR ({tag})", "psnr [dB]",
                      _series_by_task(record, "post_psnr"))
        table_lines.append(f"== {tag} ==")
        table_lines.extend(_text_table(record))
        table_lines.append("")
    (report_dir / "report.txt").write_text("\n".join(table_lines))
    print(f"report: wrote {3 * len(csvs)} plots and report.txt to {report_dir}")
    return 0


# ---------------------------------------------------------------------------
# gradcheck / oracle

def cmd_gradcheck(cfg: ExperimentConfig) -> int:
    rng = np.random.default_rng(cfg.seed_base)
    hr = rng.uniform(0, 1, (2, 1, 32, 32))
    from .degrade import bicubic_resize_array

    lr = np.clip(bicubic_resize_array(hr, 2, "down"), 0, 1)
    batch = [(ImagePlane(hr[i]), ImagePlane(lr[i])) for i in range(2)]
    ok = True
    for dtype, step, tol in ((np.float32, 1e-3, 1e-4), (np.float64, 1e-5, 1e-7)):
        net = sr_model.init_net(2, hidden=cfg.train.hidden, seed=cfg.seed_base, dtype=dtype)
        err = sr_model.gradient_check(net, batch, probes=20, step=step, seed=cfg.seed_base)
        status = "ok" if err < tol else "FAIL"
        ok = ok and err < tol
        print(f"gradcheck {np.dtype(dtype).name}: max scaled error {err:.3e} "
              f"(tolerance {tol:.0e}) {status}")
    return 0 if ok else 1


def cmd_oracle(cfg: ExperimentConfig) -> int:
    rng = np.random.default_rng(cfg.seed_base)
    worst = 0.0
    for _ in range(1000):
        n_tasks = int(rng.integers(2, 9))
        losses = [rng.uniform(0, 10, int(rng.integers(1, 51))) for _ in range(n_tasks)]
        w = rng.uniform(0.05, 1.0, n_tasks)
        w /= w.sum()
        la, lb = equivalence_oracle(losses, w)
        worst = max(worst, abs(la - lb) / max(abs(la), 1e-300))
    status = "ok" if worst < 1e-12 else "FAIL"
    print(f"oracle: max relative deviation over 1000 instances {worst:.3e} "
          f"(tolerance 1e-12) {status}")
    return 0 if worst < 1e-12 else 1


# ---------------------------------------------------------------------------

def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="degrade-mt",
        description="Degradation-subspace multi-task SR benchmark",
        epilog="DEGRADE_MT_THREADS caps worker thread parallelism.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="TOML config file")
    common.add_argument("--seeds", type=int, default=None, help="number of seeds to run")
    common.add_argument("--out", type=Path, default=None, help="output directory")
    common.add_argument("--scale", type=int, default=None, help="super-resolution factor")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="write per-task LR/HR pairs + manifest")
    sub.add_parser("run", parents=[common],
                   help="reference + uniform + rebalanced training, records and summary")
    report = sub.add_parser("report", parents=[common], help="plots and tables from a run")
    report.add_argument("run_dir", type=Path, nargs="?", default=None,
                        help="run directory (default: configured out_dir)")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    sub.add_parser("oracle", parents=[common], help="loss-equivalence oracle check")

    args = parser.parse_args(argv)
    try:
        cfg = _apply_flags(load_config(args.config), args)
        if args.command == "synth":
            return cmd_synth(cfg)
        if args.command == "run":
            return cmd_run(cfg)
        if args.command == "report":
            return cmd_report(args.run_dir if args.run_dir is not None else cfg.out_dir)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg)
        if args.command == "oracle":
            return cmd_oracle(cfg)
    except (ConfigError, TrainError, ImageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 2


if __name__ == "__main__":
    sys.exit(main())
