"""Training regimes: single-task references, uniform baseline, rebalanced run.

One engine drives all regimes. At each interval boundary the shared net is
evaluated on every task's frozen validation set; in rebalanced mode those
numbers become PSNR distances, weights, and quotas, while uniform mode pins
equal quotas. Forcing uniform weights inside the rebalanced path reproduces
the uniform baseline bit for bit under shared seeds, which is the key
regression guard for the whole pipeline.
"""

from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .degrade import DegradationConfig, apply_chain
from .img import psnr, ssim
from .rebalance import TaskSnapshot, plan_interval, weights_to_quotas
from .sr_model import SRNet, _to_cl, adam_step, forward, init_net, init_optim, \
    loss_and_grad_cl, upsample_batch
from .taskspace import SubspaceSpec, Task, TaskSet, make_training_batch


class TrainError(ValueError):
    """Invalid training configuration or inputs."""


def _max_workers() -> int:
    env = os.environ.get("DEGRADE_MT_THREADS")
    if env:
        return max(1, int(env))
    return min(4, os.cpu_count() or 1)


def _thread_map(fn, items):
    items = list(items)
    workers = min(_max_workers(), len(items))
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


@dataclass(frozen=True)
class TrainConfig:
    intervals: int = 8
    iters_per_interval: int = 200
    batch_size: int = 8
    samples_per_interval: int = 1600
    learning_rate: float = 3e-3
    lr_decay: float = 0.8  # per-interval multiplier
    init_seed: int = 0
    data_seed: int = 0
    clip_db: float = 1.0
    eval_cadence: int = 1  # intervals between validation refreshes
    patch_size: int = 48
    floor_frac: float = 0.01
    hidden: int = 16
    ssim_window: int = 11
    ssim_sigma: float = 1.5

    def __post_init__(self):
        if self.intervals < 1:
            raise TrainError(f"intervals must be >= 1, got {self.intervals}")
        if self.iters_per_interval < 0:
            raise TrainError("iters_per_interval must be >= 0")
        if self.batch_size < 1 or self.samples_per_interval < 1:
            raise TrainError("batch_size and samples_per_interval must be >= 1")
        if self.eval_cadence < 1:
            raise TrainError("eval_cadence must be >= 1")
        if self.clip_db <= 0:
            raise TrainError("clip_db must be positive")

    @property
    def floor_min(self) -> int:
        return max(1, round(self.floor_frac * self.samples_per_interval))


@dataclass(frozen=True)
class RunRow:
    interval: int
    task_id: int
    task_name: str
    psnr_single: Optional[float]  # None when the regime has no references
    psnr_multi: float
    distance: Optional[float]
    weight: float
    quota: int
    post_psnr: float
    post_ssim: float


RUN_CSV_HEADER = (
    "regime", "init_seed", "data_seed", "interval", "task_id", "task_name",
    "psnr_single", "psnr_multi", "distance", "weight", "quota", "post_psnr", "post_ssim",
)


@dataclass
class RunRecord:
    """Per-interval, per-task audit trail of one training run."""

    regime: str
    init_seed: int
    data_seed: int
    rows: list = field(default_factory=list)

    def final_metrics(self) -> dict:
        """task_id -> (psnr, ssim) after the last interval."""
        last = max(r.interval for r in self.rows)
        return {r.task_id: (r.post_psnr, r.post_ssim) for r in self.rows if r.interval == last}

    def min_final_psnr(self) -> float:
        return min(p for p, _ in self.final_metrics().values())

    def mean_final_psnr(self) -> float:
        finals = self.final_metrics()
        return sum(p for p, _ in finals.values()) / len(finals)

    def to_csv(self, path):
        with open(Path(path), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(RUN_CSV_HEADER)
            for r in self.rows:
                writer.writerow([
                    self.regime, self.init_seed, self.data_seed,
                    r.interval, r.task_id, r.task_name,
                    "" if r.psnr_single is None else repr(r.psnr_single),
                    repr(r.psnr_multi),
                    "" if r.distance is None else repr(r.distance),
                    repr(r.weight), r.quota, repr(r.post_psnr), repr(r.post_ssim),
                ])

    @classmethod
    def from_csv(cls, path) -> "RunRecord":
        path = Path(path)
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or tuple(header) != RUN_CSV_HEADER:
                raise TrainError(f"{path}: unexpected header {header}")
            record = None
            for lineno, cells in enumerate(reader, start=2):
                try:
                    if len(cells) != len(RUN_CSV_HEADER):
                        raise ValueError(f"expected {len(RUN_CSV_HEADER)} cells, got {len(cells)}")
                    regime, init_seed, data_seed = cells[0], int(cells[1]), int(cells[2])
                    row = RunRow(
                        interval=int(cells[3]),
                        task_id=int(cells[4]),
                        task_name=cells[5],
                        psnr_single=float(cells[6]) if cells[6] else None,
                        psnr_multi=float(cells[7]),
                        distance=float(cells[8]) if cells[8] else None,
                        weight=float(cells[9]),
                        quota=int(cells[10]),
                        post_psnr=float(cells[11]),
                        post_ssim=float(cells[12]),
                    )
                except ValueError as exc:
                    raise TrainError(f"{path}: bad row at line {lineno}: {exc}") from exc
                if record is None:
                    record = cls(regime=regime, init_seed=init_seed, data_seed=data_seed)
                record.rows.append(row)
        if record is None:
            raise TrainError(f"{path}: no data rows")
        return record


def evaluate_on_task(net: SRNet, task: Task, ssim_window=11, ssim_sigma=1.5):
    """Mean (PSNR, SSIM) of clamped predictions over the task's frozen val pairs."""
    if not task.val_pairs:
        raise TrainError(f"task {task.name} has no validation pairs")
    psnrs, ssims = [], []
    for pair in task.val_pairs:
        pred = forward(net, pair.lr)
        psnrs.append(psnr(pred, pair.hr))
        ssims.append(ssim(pred, pair.hr, ssim_window, ssim_sigma))
    return float(np.mean(psnrs)), float(np.mean(ssims))


def _eval_all(net, tasks, cfg: TrainConfig):
    return _thread_map(
        lambda t: evaluate_on_task(net, t, cfg.ssim_window, cfg.ssim_sigma), tasks
    )


def _interval_pools(tasks, quotas, k, cfg, dtype):
    """Quota-sized per-task pools, concatenated in task order."""
    per_task = _thread_map(
        lambda tq: make_training_batch(tq[0], tq[1], k, cfg.patch_size),
        zip(tasks, quotas),
    )
    pairs = [pair for batch in per_task for pair in batch]
    hr = np.stack([p.data for p, _ in pairs]).astype(dtype)
    lr = np.stack([q.data for _, q in pairs])
    return hr, lr


def _train_regime(tasks: Sequence[Task], scale: int, cfg: TrainConfig,
                  refs: Optional[dict], rebalanced: bool, regime: str,
                  warm_start: Optional[SRNet] = None):
    channels = tasks[0].hr_source[0].channels
    n = len(tasks)
    total = cfg.samples_per_interval
    if total < n * cfg.floor_min:
        raise TrainError(f"samples_per_interval {total} below {n} tasks x floor {cfg.floor_min}")
    if rebalanced and refs is None:
        raise TrainError("rebalanced training requires reference PSNRs")
    if refs is not None and any(t.id not in refs for t in tasks):
        raise TrainError("missing reference PSNR for some task")

    if warm_start is not None:
        if warm_start.scale != scale or warm_start.channels != channels:
            raise TrainError("warm-start net does not match the task set")
        net = warm_start.copy()
    else:
        net = init_net(scale, channels=channels, hidden=cfg.hidden, seed=cfg.init_seed)
    opt = init_optim(net, cfg.learning_rate)
    record = RunRecord(regime=regime, init_seed=cfg.init_seed, data_seed=cfg.data_seed)

    metrics = _eval_all(net, tasks, cfg)
    used_metrics = metrics
    for k in range(cfg.intervals):
        if k % cfg.eval_cadence == 0:
            used_metrics = metrics
        if rebalanced:
            snaps = [TaskSnapshot(t.id, refs[t.id], m[0]) for t, m in zip(tasks, used_metrics)]
            plan = plan_interval(k, snaps, total, cfg.clip_db, cfg.floor_min)
            weights, quotas = plan.weights, plan.quotas
        else:
            weights = tuple(1.0 / n for _ in tasks)
            quotas = tuple(
                int(q) for q in weights_to_quotas(np.full(n, 1.0 / n), total, cfg.floor_min)
            )

        hr_pool, lr_pool = _interval_pools(tasks, quotas, k, cfg, net.dtype)
        up_pool = _to_cl(upsample_batch(net, lr_pool))
        hr_pool = _to_cl(hr_pool)
        perm = np.random.default_rng(
            np.random.SeedSequence([cfg.data_seed, 4242, k])
        ).permutation(hr_pool.shape[0])
        hr_pool, up_pool = hr_pool[perm], up_pool[perm]

        opt.learning_rate = cfg.learning_rate * cfg.lr_decay ** k
        pool_size = hr_pool.shape[0]
        for it in range(cfg.iters_per_interval):
            sel = (np.arange(cfg.batch_size) + it * cfg.batch_size) % pool_size
            _, grad = loss_and_grad_cl(net, hr_pool[sel], up_pool[sel])
            adam_step(net, opt, grad)

        metrics = _eval_all(net, tasks, cfg)
        for i, task in enumerate(tasks):
            single = refs[task.id] if refs is not None else None
            record.rows.append(RunRow(
                interval=k,
                task_id=task.id,
                task_name=task.name,
                psnr_single=single,
                psnr_multi=used_metrics[i][0],
                distance=None if single is None else single - used_metrics[i][0],
                weight=weights[i],
                quota=quotas[i],
                post_psnr=metrics[i][0],
                post_ssim=metrics[i][1],
            ))
    return net, record


def train_single_task(task: Task, cfg: TrainConfig):
    """Dedicated reference run on one task; returns the net and its val PSNR."""
    net, record = _train_regime(
        [task], task.subspace.fixed_scale, cfg, refs=None, rebalanced=False,
        regime=f"single-{task.name}",
    )
    final_psnr, _ = record.final_metrics()[task.id]
    return net, final_psnr


def train_multitask_uniform(taskset: TaskSet, cfg: TrainConfig,
                            warm_start: Optional[SRNet] = None):
    """Joint training with equal per-task quotas every interval."""
    return _train_regime(taskset.tasks, taskset.scale, cfg, refs=None,
                         rebalanced=False, regime="uniform", warm_start=warm_start)


def train_multitask_rebalanced(taskset: TaskSet, refs: dict, cfg: TrainConfig,
                               force_uniform: bool = False,
                               warm_start: Optional[SRNet] = None):
    """Joint training with PSNR-distance-driven quotas per interval.

    `force_uniform` keeps the full rebalanced code path but pins equal
    quotas; under shared seeds it must be bit-identical to the uniform
    baseline (regime-equivalence guard). `warm_start` trains from a copy of
    an existing net instead of a fresh seeded init.
    """
    if force_uniform:
        return _train_regime(taskset.tasks, taskset.scale, cfg, refs=refs,
                             rebalanced=False, regime="rebalanced-forced-uniform",
                             warm_start=warm_start)
    return _train_regime(taskset.tasks, taskset.scale, cfg, refs=refs,
                         rebalanced=True, regime="rebalanced", warm_start=warm_start)


def train_references(taskset: TaskSet, cfg: TrainConfig):
    """Train one reference per task; returns ({task_id: net}, {task_id: psnr})."""
    nets, refs = {}, {}
    for task in taskset.tasks:
        net, ref_psnr = train_single_task(task, cfg)
        nets[task.id] = net
        refs[task.id] = ref_psnr
    return nets, refs


# ---------------------------------------------------------------------------
# Operator-discriminability experiment

_AXES = ("blur", "noise", "quality", "scale")


@dataclass(frozen=True)
class AxisReport:
    """Per-severity-level fine-tuning gains for one degradation operator."""

    axis: str
    levels: tuple
    improvements: tuple
    variance: float


def _axis_levels(axis, count, blur_range, noise_range, quality_range, patch):
    if axis == "blur":
        return [float(v) for v in np.linspace(*blur_range, count)]
    if axis == "noise":
        return [float(v) for v in np.linspace(*noise_range, count)]
    if axis == "quality":
        vals = sorted({int(round(v)) for v in np.linspace(*quality_range, count)})
        if len(vals) < count:
            raise TrainError(f"quality range {quality_range} too narrow for {count} levels")
        return vals
    # the SR net needs LR inputs of at least 8x8
    divisors = [d for d in range(1, patch + 1) if patch % d == 0 and patch // d >= 8]
    if len(divisors) < count:
        raise TrainError(f"patch {patch} has only {len(divisors)} usable scales")
    return divisors[:count]


def _level_config(axis, value, blur_mid, noise_mid, quality_mid, scale):
    cfg = dict(blur_sigma=blur_mid, noise_sigma=noise_mid,
               jpeg_quality=quality_mid, scale=scale)
    key = {"blur": "blur_sigma", "noise": "noise_sigma",
           "quality": "jpeg_quality", "scale": "scale"}[axis]
    cfg[key] = value
    return DegradationConfig(**cfg)


def _point_task(name, cfg: DegradationConfig, hr_source, seed, task_id=9000):
    spec = SubspaceSpec(
        name=name,
        blur_range=(cfg.blur_sigma, cfg.blur_sigma),
        noise_range=(cfg.noise_sigma, cfg.noise_sigma),
        fixed_scale=cfg.scale,
        quality_range=(cfg.jpeg_quality, cfg.jpeg_quality),
    )
    return Task(id=task_id, subspace=spec, hr_source=tuple(hr_source),
                val_pairs=(), seed=seed)


def _fixed_val_pairs(hr_val, cfg: DegradationConfig, count, seed, patch):
    from .taskspace import _seeded_crop

    pairs = []
    for i in range(count):
        crop_ss, noise_ss = np.random.SeedSequence([seed, 31, i]).spawn(2)
        hr = _seeded_crop(np.random.default_rng(crop_ss), hr_val, patch)
        lr = apply_chain(hr, cfg, int(noise_ss.generate_state(1)[0]))
        pairs.append((hr, lr))
    return pairs


def _eval_pairs(net, pairs):
    return float(np.mean([psnr(forward(net, lr), hr) for hr, lr in pairs]))


def _finetune(base: SRNet, task: Task, iters, batch_size, patch, lr):
    net = base.copy()
    opt = init_optim(net, lr)
    pool = make_training_batch(task, iters * batch_size, 0, patch)
    hr = _to_cl(np.stack([p.data for p, _ in pool]).astype(net.dtype))
    up = _to_cl(upsample_batch(net, np.stack([q.data for _, q in pool])))
    for it in range(iters):
        sel = np.arange(it * batch_size, (it + 1) * batch_size)
        _, grad = loss_and_grad_cl(net, hr[sel], up[sel])
        adam_step(net, opt, grad)
    return net


def pretrain_mixed(hr_train, cfg: TrainConfig, scale=2, blur_range=(0.2, 3.0),
                   noise_range=(0.004, 0.12), quality_range=(60, 95),
                   iters=400, seed=0) -> SRNet:
    """Base net for the discriminability probe, trained on full-rectangle data."""
    spec = SubspaceSpec("mixed", tuple(blur_range), tuple(noise_range),
                        fixed_scale=scale, quality_range=tuple(quality_range))
    mixed = Task(id=9999, subspace=spec, hr_source=tuple(hr_train), val_pairs=(),
                 seed=seed)
    channels = mixed.hr_source[0].channels
    net = init_net(scale, channels=channels, hidden=cfg.hidden, seed=seed)
    opt = init_optim(net, cfg.learning_rate)
    pool = make_training_batch(mixed, iters * cfg.batch_size, 0, cfg.patch_size)
    hr = _to_cl(np.stack([p.data for p, _ in pool]).astype(net.dtype))
    up = _to_cl(upsample_batch(net, np.stack([q.data for _, q in pool])))
    for it in range(iters):
        sel = np.arange(it * cfg.batch_size, (it + 1) * cfg.batch_size)
        _, grad = loss_and_grad_cl(net, hr[sel], up[sel])
        adam_step(net, opt, grad)
    return net


def operator_discriminability(hr_train, hr_val, cfg: TrainConfig, axis: str, levels,
                              blur_range=(0.2, 3.0), noise_range=(0.004, 0.12),
                              quality_range=(60, 95), scale=2,
                              pretrain_iters=400, finetune_iters=100,
                              val_count=6, seed=0, base_net: Optional[SRNet] = None):
    """Variance of per-severity-level fine-tuning gains for one operator axis.

    A base net is pre-trained on mixed data (or supplied), then one copy per
    level is fine-tuned on that severity alone; large variance in the PSNR
    improvements marks the axis as strongly task-defining.

    `levels` is either a count (at least 5) or an explicit list of severity
    values.
    """
    if axis not in _AXES:
        raise TrainError(f"axis must be one of {_AXES}, got {axis!r}")
    if isinstance(levels, int):
        if levels < 5:
            raise TrainError(f"need at least 5 levels, got {levels}")
        level_values = _axis_levels(axis, levels, blur_range, noise_range,
                                    quality_range, cfg.patch_size)
    else:
        level_values = list(levels)
        if not level_values:
            raise TrainError("levels list is empty")

    blur_mid = float(np.mean(blur_range))
    noise_mid = float(np.mean(noise_range))
    quality_mid = int(round(np.mean(quality_range)))
    axis_key = _AXES.index(axis)

    if base_net is None:
        base_net = pretrain_mixed(hr_train, cfg, scale, blur_range, noise_range,
                                  quality_range, pretrain_iters, seed)

    improvements = []
    for li, value in enumerate(level_values):
        level_cfg = _level_config(axis, value, blur_mid, noise_mid, quality_mid, scale)
        level_seed = int(np.random.SeedSequence([seed, 17, axis_key, li]).generate_state(1)[0])
        val_pairs = _fixed_val_pairs(hr_val, level_cfg, val_count, level_seed,
                                     patch=2 * cfg.patch_size)
        base_eval = base_net if level_cfg.scale == base_net.scale else replace_scale(base_net, level_cfg.scale)
        task = _point_task(f"{axis}-{li}", level_cfg, hr_train, level_seed,
                           task_id=9000 + li)
        tuned = _finetune(base_eval, task, finetune_iters, cfg.batch_size,
                          cfg.patch_size, cfg.learning_rate)
        improvements.append(_eval_pairs(tuned, val_pairs) - _eval_pairs(base_eval, val_pairs))
    return AxisReport(
        axis=axis,
        levels=tuple(level_values),
        improvements=tuple(improvements),
        variance=float(np.var(improvements)),
    )


def replace_scale(net: SRNet, scale: int) -> SRNet:
    """Same weights bound to a different upsample factor (convs run at HR size)."""
    return SRNet(scale, net.channels, net.hidden, net.params.copy(), net.seed)
