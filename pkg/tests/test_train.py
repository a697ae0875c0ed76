import hashlib

import numpy as np
import pytest

from degrade_mt import sr_model
from degrade_mt.train import (
    RunRecord, RunRow, TrainConfig, TrainError, evaluate_on_task,
    operator_discriminability, train_multitask_rebalanced, train_multitask_uniform,
    train_references, train_single_task,
)


def checksum(net):
    return hashlib.sha256(sr_model.checkpoint_bytes(net)).hexdigest()


class TestTrainConfig:
    def test_defaults_are_desk_scale(self):
        cfg = TrainConfig()
        assert (cfg.intervals, cfg.iters_per_interval, cfg.batch_size) == (8, 200, 8)
        assert cfg.samples_per_interval == 1600
        assert cfg.patch_size == 48
        assert cfg.floor_min == 16

    @pytest.mark.parametrize("kwargs", [
        dict(intervals=0), dict(iters_per_interval=-1), dict(batch_size=0),
        dict(samples_per_interval=0), dict(eval_cadence=0), dict(clip_db=0.0),
    ])
    def test_validation(self, kwargs):
        with pytest.raises(TrainError):
            TrainConfig(**kwargs)


class TestRegimes:
    def test_uniform_record_shape(self, tiny_taskset, mini_cfg):
        net, record = train_multitask_uniform(tiny_taskset, mini_cfg)
        assert record.regime == "uniform"
        assert len(record.rows) == mini_cfg.intervals * 4
        for row in record.rows:
            assert row.weight == pytest.approx(0.25)
            assert row.psnr_single is None and row.distance is None
        by_interval = {}
        for row in record.rows:
            by_interval.setdefault(row.interval, []).append(row.quota)
        for quotas in by_interval.values():
            assert sum(quotas) == mini_cfg.samples_per_interval
            assert max(quotas) - min(quotas) <= 1

    def test_regime_equivalence_bit_identical(self, tiny_taskset, mini_cfg):
        _, refs = train_references(tiny_taskset, mini_cfg)
        uniform_net, _ = train_multitask_uniform(tiny_taskset, mini_cfg)
        forced_net, forced_rec = train_multitask_rebalanced(
            tiny_taskset, refs, mini_cfg, force_uniform=True)
        assert checksum(uniform_net) == checksum(forced_net)
        assert forced_rec.regime == "rebalanced-forced-uniform"
        # the forced record still carries distances for the audit trail
        assert all(r.distance is not None for r in forced_rec.rows)

    def test_deterministic_repeat(self, tiny_taskset, mini_cfg):
        net_a, rec_a = train_multitask_uniform(tiny_taskset, mini_cfg)
        net_b, rec_b = train_multitask_uniform(tiny_taskset, mini_cfg)
        assert checksum(net_a) == checksum(net_b)
        assert rec_a.rows == rec_b.rows

    def test_rebalanced_argmax_distance_gets_max_quota(self, tiny_taskset, mini_cfg):
        _, refs = train_references(tiny_taskset, mini_cfg)
        _, record = train_multitask_rebalanced(tiny_taskset, refs, mini_cfg)
        for k in range(mini_cfg.intervals):
            rows = [r for r in record.rows if r.interval == k]
            distances = [r.distance for r in rows]
            quotas = [r.quota for r in rows]
            assert quotas[int(np.argmax(distances))] == max(quotas)
            assert sum(quotas) == mini_cfg.samples_per_interval
            assert sum(r.weight for r in rows) == pytest.approx(1.0, abs=1e-9)

    def test_zero_iteration_budget_keeps_init(self, tiny_taskset):
        cfg = TrainConfig(intervals=1, iters_per_interval=0, batch_size=4,
                          samples_per_interval=16, patch_size=32, init_seed=3)
        net, record = train_multitask_uniform(tiny_taskset, cfg)
        fresh = sr_model.init_net(tiny_taskset.scale, hidden=cfg.hidden, seed=3)
        assert np.array_equal(net.params, fresh.params)
        assert len(record.rows) == 4

    def test_rebalanced_requires_refs(self, tiny_taskset, mini_cfg):
        with pytest.raises(TrainError):
            train_multitask_rebalanced(tiny_taskset, {0: 30.0}, mini_cfg)

    def test_floor_infeasible(self, tiny_taskset):
        # 3 samples cannot satisfy floor 1 for 4 tasks; caught at run time
        cfg = TrainConfig(intervals=1, iters_per_interval=1, batch_size=1,
                          samples_per_interval=3, patch_size=32)
        with pytest.raises(TrainError):
            train_multitask_uniform(tiny_taskset, cfg)

    def test_eval_cadence_reuses_stale_metrics(self, tiny_taskset):
        cfg = TrainConfig(intervals=4, iters_per_interval=5, batch_size=4,
                          samples_per_interval=20, patch_size=32, eval_cadence=2,
                          init_seed=2, data_seed=2)
        _, refs = train_references(tiny_taskset, TrainConfig(
            intervals=1, iters_per_interval=5, batch_size=4,
            samples_per_interval=20, patch_size=32, init_seed=2, data_seed=2))
        _, record = train_multitask_rebalanced(tiny_taskset, refs, cfg)
        for task_id in range(4):
            rows = sorted((r for r in record.rows if r.task_id == task_id),
                          key=lambda r: r.interval)
            assert rows[0].psnr_multi == rows[1].psnr_multi  # stale between refreshes
            assert rows[2].psnr_multi == rows[3].psnr_multi

    def test_warm_start(self, tiny_taskset, mini_cfg):
        base, _ = train_multitask_uniform(tiny_taskset, mini_cfg)
        cfg = TrainConfig(intervals=1, iters_per_interval=0, batch_size=4,
                          samples_per_interval=16, patch_size=32)
        net, _ = train_multitask_uniform(tiny_taskset, cfg, warm_start=base)
        assert np.array_equal(net.params, base.params)
        assert net is not base


class TestSingleTask:
    def test_mild_reference_beats_severe(self, tiny_taskset, mini_cfg):
        _, mild_psnr = train_single_task(tiny_taskset.tasks[0], mini_cfg)
        _, severe_psnr = train_single_task(tiny_taskset.tasks[3], mini_cfg)
        assert mild_psnr > severe_psnr

    def test_deterministic(self, tiny_taskset, mini_cfg):
        _, a = train_single_task(tiny_taskset.tasks[1], mini_cfg)
        _, b = train_single_task(tiny_taskset.tasks[1], mini_cfg)
        assert a == b

    def test_references_never_mutated_by_later_runs(self, tiny_taskset, mini_cfg):
        nets, refs = train_references(tiny_taskset, mini_cfg)
        sums_before = {i: checksum(n) for i, n in nets.items()}
        train_multitask_rebalanced(tiny_taskset, refs, mini_cfg)
        assert {i: checksum(n) for i, n in nets.items()} == sums_before


class TestEvaluate:
    def test_matches_manual_metrics(self, tiny_taskset, mini_cfg):
        from degrade_mt.img import psnr, ssim
        from degrade_mt.sr_model import forward, init_net

        net = init_net(tiny_taskset.scale, seed=0)
        task = tiny_taskset.tasks[0]
        got_psnr, got_ssim = evaluate_on_task(net, task)
        want_psnr = np.mean([psnr(forward(net, p.lr), p.hr) for p in task.val_pairs])
        want_ssim = np.mean([ssim(forward(net, p.lr), p.hr) for p in task.val_pairs])
        assert got_psnr == pytest.approx(want_psnr, abs=1e-12)
        assert got_ssim == pytest.approx(want_ssim, abs=1e-12)

    def test_empty_val_rejected(self, tiny_taskset):
        from dataclasses import replace

        from degrade_mt.sr_model import init_net

        bare = replace(tiny_taskset.tasks[0], val_pairs=())
        with pytest.raises(TrainError):
            evaluate_on_task(init_net(2, seed=0), bare)


class TestRunRecordCsv:
    def test_round_trip_exact(self, tiny_taskset, mini_cfg, tmp_path):
        _, refs = train_references(tiny_taskset, mini_cfg)
        _, record = train_multitask_rebalanced(tiny_taskset, refs, mini_cfg)
        path = tmp_path / "rebalanced.csv"
        record.to_csv(path)
        back = RunRecord.from_csv(path)
        assert back.regime == record.regime
        assert back.init_seed == record.init_seed
        assert back.data_seed == record.data_seed
        assert back.rows == record.rows

    def test_round_trip_with_none_fields(self, tiny_taskset, mini_cfg, tmp_path):
        _, record = train_multitask_uniform(tiny_taskset, mini_cfg)
        path = tmp_path / "uniform.csv"
        record.to_csv(path)
        assert RunRecord.from_csv(path).rows == record.rows

    def test_corrupt_row_names_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        record = RunRecord(regime="uniform", init_seed=0, data_seed=0, rows=[
            RunRow(0, 0, "mild", None, 24.0, None, 0.25, 100, 24.5, 0.8)])
        record.to_csv(path)
        lines = path.read_text().splitlines()
        lines.append(lines[1].replace("24.5", "not-a-number"))
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(TrainError, match="line 3"):
            RunRecord.from_csv(path)

    def test_empty_file_rejected(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("regime,init_seed,data_seed,interval,task_id,task_name,"
                        "psnr_single,psnr_multi,distance,weight,quota,post_psnr,post_ssim\n")
        with pytest.raises(TrainError):
            RunRecord.from_csv(path)

    def test_final_metrics_helpers(self):
        rows = [
            RunRow(0, 0, "mild", None, 20.0, None, 0.5, 10, 21.0, 0.8),
            RunRow(0, 1, "severe", None, 18.0, None, 0.5, 10, 19.0, 0.7),
            RunRow(1, 0, "mild", None, 21.0, None, 0.5, 10, 22.0, 0.85),
            RunRow(1, 1, "severe", None, 19.0, None, 0.5, 10, 20.0, 0.75),
        ]
        record = RunRecord("uniform", 0, 0, rows)
        assert record.final_metrics() == {0: (22.0, 0.85), 1: (20.0, 0.75)}
        assert record.min_final_psnr() == 20.0
        assert record.mean_final_psnr() == pytest.approx(21.0)


class TestDiscriminability:
    def test_single_level_variance_zero(self, hr_pool):
        cfg = TrainConfig(intervals=1, iters_per_interval=5, batch_size=4,
                          samples_per_interval=20, patch_size=32)
        report = operator_discriminability(
            hr_pool[6:], hr_pool[:6], cfg, "noise", [0.06],
            pretrain_iters=10, finetune_iters=5, val_count=2, seed=0)
        assert report.variance == 0.0
        assert len(report.levels) == 1 and len(report.improvements) == 1

    def test_deterministic(self, hr_pool):
        cfg = TrainConfig(intervals=1, iters_per_interval=5, batch_size=4,
                          samples_per_interval=20, patch_size=32)
        kwargs = dict(pretrain_iters=8, finetune_iters=4, val_count=2, seed=1)
        a = operator_discriminability(hr_pool[6:], hr_pool[:6], cfg, "blur",
                                      [0.3, 2.5], **kwargs)
        b = operator_discriminability(hr_pool[6:], hr_pool[:6], cfg, "blur",
                                      [0.3, 2.5], **kwargs)
        assert a == b

    def test_invalid_axis(self, hr_pool):
        cfg = TrainConfig(patch_size=32)
        with pytest.raises(TrainError):
            operator_discriminability(hr_pool[6:], hr_pool[:6], cfg, "hue", 5)

    def test_count_too_small(self, hr_pool):
        cfg = TrainConfig(patch_size=32)
        with pytest.raises(TrainError):
            operator_discriminability(hr_pool[6:], hr_pool[:6], cfg, "noise", 4)

    def test_scale_levels_respect_lr_floor(self):
        from degrade_mt.train import _axis_levels

        levels = _axis_levels("scale", 5, (0.2, 3.0), (0.004, 0.12), (60, 95), 48)
        assert levels == [1, 2, 3, 4, 6]
        with pytest.raises(TrainError):
            _axis_levels("scale", 6, (0.2, 3.0), (0.004, 0.12), (60, 95), 48)
