"""Degradation tasks as rectangles in (blur sigma, noise sigma) space.

A task set partitions the configured parameter rectangle into disjoint
subspaces (default four: mild / blur / noise / severe), carries a frozen
per-task validation set, and synthesizes reproducible training batches
whose seeds derive from (task, interval, sample index).

Interval convention: subspace bounds are half-open [lo, hi) at internal
partition edges and closed at the outer edge of the full rectangle, so
every point of the rectangle belongs to exactly one subspace.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .degrade import DegradationConfig, apply_chain
from .img import ImagePlane


class TaskSpaceError(ValueError):
    """Invalid subspace geometry or task construction arguments."""


@dataclass(frozen=True)
class SubspaceSpec:
    """One rectangular region of degradation-parameter space."""

    name: str
    blur_range: tuple
    noise_range: tuple
    fixed_scale: int = 2
    quality_range: tuple = (60, 95)
    blur_hi_open: bool = False
    noise_hi_open: bool = False

    def __post_init__(self):
        for label, (lo, hi) in (("blur", self.blur_range), ("noise", self.noise_range)):
            if not lo <= hi:
                raise TaskSpaceError(f"{self.name}: empty {label} range [{lo}, {hi}]")
        if self.blur_range[0] < 0:
            raise TaskSpaceError(f"{self.name}: blur range must be >= 0")
        if not 0 <= self.noise_range[0] <= self.noise_range[1] <= 1:
            raise TaskSpaceError(f"{self.name}: noise range must lie in [0, 1]")
        qlo, qhi = self.quality_range
        if not 1 <= qlo <= qhi <= 100:
            raise TaskSpaceError(f"{self.name}: quality range must lie in [1, 100]")
        if self.fixed_scale < 1:
            raise TaskSpaceError(f"{self.name}: scale must be >= 1")

    def contains(self, blur: float, noise: float) -> bool:
        blo, bhi = self.blur_range
        nlo, nhi = self.noise_range
        ok_b = blo <= blur < bhi if self.blur_hi_open else blo <= blur <= bhi
        ok_n = nlo <= noise < nhi if self.noise_hi_open else nlo <= noise <= nhi
        return ok_b and ok_n


def partition_default(blur_full, noise_full, blur_thresh, noise_thresh,
                      scale=2, quality_range=(60, 95)):
    """Split the rectangle into mild / blur / noise / severe at the thresholds."""
    blo, bhi = blur_full
    nlo, nhi = noise_full
    if not blo < blur_thresh < bhi:
        raise TaskSpaceError(f"blur threshold {blur_thresh} not inside ({blo}, {bhi})")
    if not nlo < noise_thresh < nhi:
        raise TaskSpaceError(f"noise threshold {noise_thresh} not inside ({nlo}, {nhi})")
    common = dict(fixed_scale=scale, quality_range=tuple(quality_range))
    return [
        SubspaceSpec("mild", (blo, blur_thresh), (nlo, noise_thresh),
                     blur_hi_open=True, noise_hi_open=True, **common),
        SubspaceSpec("blur", (blur_thresh, bhi), (nlo, noise_thresh),
                     blur_hi_open=False, noise_hi_open=True, **common),
        SubspaceSpec("noise", (blo, blur_thresh), (noise_thresh, nhi),
                     blur_hi_open=True, noise_hi_open=False, **common),
        SubspaceSpec("severe", (blur_thresh, bhi), (noise_thresh, nhi),
                     blur_hi_open=False, noise_hi_open=False, **common),
    ]


def sample_config(spec: SubspaceSpec, seed) -> DegradationConfig:
    """Uniform draw from the subspace; scale stays fixed, quality is an int draw."""
    rng = np.random.default_rng(seed)
    blur = float(rng.uniform(*spec.blur_range))
    noise = float(rng.uniform(*spec.noise_range))
    quality = int(rng.integers(spec.quality_range[0], spec.quality_range[1] + 1))
    return DegradationConfig(
        blur_sigma=blur, noise_sigma=noise, scale=spec.fixed_scale, jpeg_quality=quality
    )


@dataclass(frozen=True)
class ValPair:
    """A frozen (HR, LR) validation pair plus the exact recipe that made it."""

    hr: ImagePlane
    lr: ImagePlane
    config: DegradationConfig
    lr_seed: int


@dataclass(frozen=True)
class Task:
    """A degradation subspace bound to its HR pool and validation pairs."""

    id: int
    subspace: SubspaceSpec
    hr_source: tuple
    val_pairs: tuple
    seed: int

    @property
    def name(self) -> str:
        return self.subspace.name


@dataclass(frozen=True)
class TaskSet:
    tasks: tuple
    partition_thresholds: tuple
    blur_full: tuple
    noise_full: tuple
    scale: int
    quality_range: tuple
    val_count: int
    val_patch: int
    seed: int

    def __post_init__(self):
        if len(self.tasks) < 2:
            raise TaskSpaceError(f"need at least 2 tasks, got {len(self.tasks)}")


def _seeded_crop(rng, images: Sequence[ImagePlane], patch: int) -> ImagePlane:
    img = images[int(rng.integers(len(images)))]
    if img.height < patch or img.width < patch:
        raise TaskSpaceError(
            f"patch {patch} larger than source image {img.height}x{img.width}"
        )
    y = int(rng.integers(img.height - patch + 1))
    x = int(rng.integers(img.width - patch + 1))
    return ImagePlane(img.data[:, y : y + patch, x : x + patch])


def build_validation(task: Task, hr_images: Sequence[ImagePlane], count: int,
                     seed: int, patch: int = 64) -> Task:
    """Fill a task skeleton with `count` frozen validation pairs."""
    if count < 1:
        raise TaskSpaceError(f"count must be >= 1, got {count}")
    if not hr_images:
        raise TaskSpaceError("validation HR pool is empty")
    if patch % task.subspace.fixed_scale:
        raise TaskSpaceError(
            f"val patch {patch} not divisible by scale {task.subspace.fixed_scale}"
        )
    pairs = []
    for i in range(count):
        crop_ss, cfg_ss, noise_ss = np.random.SeedSequence([seed, task.id, i]).spawn(3)
        hr = _seeded_crop(np.random.default_rng(crop_ss), hr_images, patch)
        cfg = sample_config(task.subspace, cfg_ss)
        lr_seed = int(noise_ss.generate_state(1)[0])
        lr = apply_chain(hr, cfg, lr_seed)
        pairs.append(ValPair(hr=hr, lr=lr, config=cfg, lr_seed=lr_seed))
    return replace(task, val_pairs=tuple(pairs))


def make_training_batch(task: Task, quota: int, interval_index: int, patch: int):
    """Synthesize `quota` (HR, LR) pairs for one interval, fully seeded.

    Sample seeds mix (task seed, task id, interval, sample index), so
    batches are reproducible and the streams never repeat across intervals.
    """
    if quota < 0:
        raise TaskSpaceError(f"quota must be >= 0, got {quota}")
    if patch % task.subspace.fixed_scale:
        raise TaskSpaceError(
            f"patch {patch} not divisible by scale {task.subspace.fixed_scale}"
        )
    pairs = []
    for i in range(quota):
        crop_ss, cfg_ss, noise_ss = np.random.SeedSequence(
            [task.seed, task.id, interval_index, i]
        ).spawn(3)
        hr = _seeded_crop(np.random.default_rng(crop_ss), task.hr_source, patch)
        cfg = sample_config(task.subspace, cfg_ss)
        lr = apply_chain(hr, cfg, int(noise_ss.generate_state(1)[0]))
        pairs.append((hr, lr))
    return pairs


def build_taskset(hr_train: Sequence[ImagePlane], hr_val: Sequence[ImagePlane],
                  blur_full=(0.2, 3.0), noise_full=(0.004, 0.12),
                  blur_thresh=1.5, noise_thresh=0.04, scale=2,
                  quality_range=(60, 95), val_count=8, val_patch=64, seed=0) -> TaskSet:
    """Partition, bind HR pools, and freeze validation sets for all tasks.

    Training crops come from `hr_train` and validation pairs from `hr_val`;
    keeping the pools separate is what guarantees train/val disjointness.
    """
    if not hr_train:
        raise TaskSpaceError("training HR pool is empty")
    specs = partition_default(blur_full, noise_full, blur_thresh, noise_thresh,
                              scale=scale, quality_range=quality_range)
    tasks = []
    for i, spec in enumerate(specs):
        skeleton = Task(id=i, subspace=spec, hr_source=tuple(hr_train),
                        val_pairs=(), seed=seed)
        tasks.append(build_validation(skeleton, hr_val, val_count, seed, val_patch))
    return TaskSet(
        tasks=tuple(tasks),
        partition_thresholds=(blur_thresh, noise_thresh),
        blur_full=tuple(blur_full),
        noise_full=tuple(noise_full),
        scale=scale,
        quality_range=tuple(quality_range),
        val_count=val_count,
        val_patch=val_patch,
        seed=seed,
    )


def describe_taskset(ts: TaskSet) -> str:
    """Human-readable TOML description of the task-set geometry and seeds."""
    buf = io.StringIO()
    buf.write("[taskspace]\n")
    buf.write(f"blur_full = [{ts.blur_full[0]!r}, {ts.blur_full[1]!r}]\n")
    buf.write(f"noise_full = [{ts.noise_full[0]!r}, {ts.noise_full[1]!r}]\n")
    buf.write(f"blur_thresh = {ts.partition_thresholds[0]!r}\n")
    buf.write(f"noise_thresh = {ts.partition_thresholds[1]!r}\n")
    buf.write(f"scale = {ts.scale}\n")
    buf.write(f"quality_range = [{ts.quality_range[0]}, {ts.quality_range[1]}]\n")
    buf.write(f"val_count = {ts.val_count}\n")
    buf.write(f"val_patch = {ts.val_patch}\n")
    buf.write(f"seed = {ts.seed}\n")
    for task in ts.tasks:
        spec = task.subspace
        buf.write(f"\n[task.{spec.name}]\n")
        buf.write(f"id = {task.id}\n")
        buf.write(f"blur_range = [{spec.blur_range[0]!r}, {spec.blur_range[1]!r}]\n")
        buf.write(f"noise_range = [{spec.noise_range[0]!r}, {spec.noise_range[1]!r}]\n")
        buf.write(f"blur_hi_open = {'true' if spec.blur_hi_open else 'false'}\n")
        buf.write(f"noise_hi_open = {'true' if spec.noise_hi_open else 'false'}\n")
        buf.write(f"val_pairs = {len(task.val_pairs)}\n")
    return buf.getvalue()
