import statistics

import numpy as np
import pytest

from depthdistill.adam import AdamState, adam_step
from depthdistill.checkpoint import (
    CheckpointError,
    load_checkpoint,
    save_checkpoint,
    verify_checkpoint,
)
from depthdistill.distill import silog_loss
from depthdistill.nets import batch_to_tensor, init_params, teacher_forward
from depthdistill.stereo import ConfigError, GenConfig, build_dataset, load_split
from depthdistill.tensor import NumericsError, Tensor
from depthdistill.train import (
    RUNLOG_HEADER,
    TrainConfig,
    read_runlog,
    train_student,
    train_teacher,
)


def scalar_param(value: float) -> Tensor:
    return Tensor(np.array(value), requires_grad=True)


class TestAdam:
    def test_zero_gradient_leaves_params_unchanged(self):
        p = scalar_param(3.5)
        p.grad = np.zeros(())
        state = AdamState()
        adam_step([("p", p)], state, lr=0.1)
        assert float(p.data) == 3.5
        assert state.t == 1

    def test_t_increments_once_per_step_not_per_param(self):
        a, b = scalar_param(1.0), scalar_param(2.0)
        a.grad = np.zeros(())
        b.grad = np.zeros(())
        state = AdamState()
        adam_step([("a", a), ("b", b)], state, lr=0.1)
        adam_step([("a", a), ("b", b)], state, lr=0.1)
        assert state.t == 2

    def test_first_step_unit_gradient_moves_by_lr(self):
        # bias-corrected m/sqrt(v) is exactly 1 on step one, up to eps
        p = scalar_param(0.0)
        p.grad = np.ones(())
        adam_step([("p", p)], AdamState(), lr=0.1)
        assert abs(float(p.data) + 0.1) < 1e-6

    def test_quadratic_descends_monotonically(self):
        p = scalar_param(2.0)
        state = AdamState()
        losses = []
        for _ in range(2):
            loss = (p * p).sum()
            losses.append(float(loss.data))
            p.zero_grad()
            loss.backward()
            adam_step([("p", p)], state, lr=0.05)
        final = float((p * p).sum().data)
        assert losses[1] < losses[0]
        assert final < losses[1]

    def test_skips_params_without_grads(self):
        p = scalar_param(1.0)
        adam_step([("p", p)], AdamState(), lr=0.1)
        assert float(p.data) == 1.0

    def test_non_finite_grad_names_the_parameter(self):
        p = scalar_param(1.0)
        p.grad = np.full((), np.nan)
        with pytest.raises(ValueError, match="stem_w"):
            adam_step([("stem_w", p)], AdamState(), lr=0.1)

    def test_moments_persist_across_steps(self):
        # second identical step is smaller than the first only because of
        # bias correction; both moments must carry over
        p = scalar_param(0.0)
        state = AdamState()
        p.grad = np.ones(())
        adam_step([("p", p)], state, lr=0.1)
        assert "p" in state.m and "p" in state.v
        first = float(p.data)
        p.grad = np.ones(())
        adam_step([("p", p)], state, lr=0.1)
        assert float(p.data) < first < 0


class TestCheckpoint:
    def roundtrip(self, tmp_path, role="uem"):
        params = init_params(role, seed=3)
        path = tmp_path / "m.ckpt"
        save_checkpoint(params, {"note": 1}, path, step=17)
        return params, path

    def test_round_trip_within_float32(self, tmp_path):
        params, path = self.roundtrip(tmp_path)
        loaded, header = load_checkpoint(path)
        assert loaded.role == params.role
        assert header["step"] == 17
        assert header["config"] == {"note": 1}
        for (n1, t1), (n2, t2) in zip(params.items(), loaded.items()):
            assert n1 == n2
            assert t2.data.dtype == np.float64
            np.testing.assert_array_equal(t1.data.astype(np.float32), t2.data)

    def test_save_load_save_byte_identical(self, tmp_path):
        params, path = self.roundtrip(tmp_path)
        loaded, header = load_checkpoint(path)
        again = tmp_path / "again.ckpt"
        save_checkpoint(loaded, header["config"], again, step=header["step"])
        assert path.read_bytes() == again.read_bytes()

    def test_verify_reports_counts(self, tmp_path):
        _, path = self.roundtrip(tmp_path)
        info = verify_checkpoint(path)
        assert info["role"] == "uem"
        assert info["step"] == 17
        assert info["payload_bytes"] == 4 * sum(
            t.data.size for t in init_params("uem", 3).tensors())

    def test_corrupt_payload_byte_still_loads(self, tmp_path):
        _, path = self.roundtrip(tmp_path)
        raw = bytearray(path.read_bytes())
        raw[-1] ^= 0xFF
        path.write_bytes(bytes(raw))
        loaded, _ = load_checkpoint(path)  # data is not checksummed
        assert loaded.role == "uem"
        verify_checkpoint(path)

    def test_truncation_rejected(self, tmp_path):
        _, path = self.roundtrip(tmp_path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-5])
        with pytest.raises(CheckpointError, match="declares"):
            verify_checkpoint(path)
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_bad_magic_rejected(self, tmp_path):
        _, path = self.roundtrip(tmp_path)
        raw = bytearray(path.read_bytes())
        raw[0] = ord("X")
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_header_not_json_rejected(self, tmp_path):
        _, path = self.roundtrip(tmp_path)
        raw = bytearray(path.read_bytes())
        raw[12] = 0xFF  # inside the JSON header
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_truncated_header_rejected(self, tmp_path):
        _, path = self.roundtrip(tmp_path)
        path.write_bytes(path.read_bytes()[:10])
        with pytest.raises(CheckpointError, match="header"):
            load_checkpoint(path)


class TestTrainConfig:
    def test_rejects_bad_stage(self):
        with pytest.raises(ConfigError, match="stage"):
            TrainConfig(stage="both", manifest="m", out_ckpt="o")

    def test_rejects_non_positive_lr(self):
        with pytest.raises(ConfigError, match="learning_rate"):
            TrainConfig(stage="teacher", manifest="m", out_ckpt="o", learning_rate=0.0)

    def test_rejects_zero_batch(self):
        with pytest.raises(ConfigError, match="batch_size"):
            TrainConfig(stage="teacher", manifest="m", out_ckpt="o", batch_size=0)

    def test_student_requires_teacher_ckpt(self):
        with pytest.raises(ConfigError, match="teacher checkpoint"):
            TrainConfig(stage="student", manifest="m", out_ckpt="o")

    def test_runlog_defaults_next_to_checkpoint(self):
        cfg = TrainConfig(stage="teacher", manifest="m", out_ckpt="run/t.ckpt")
        assert cfg.runlog == "run/t.runlog.csv"

    def test_settings_carry_ablation_flags(self):
        cfg = TrainConfig(stage="student", manifest="m", out_ckpt="o",
                          teacher_ckpt="t", use_uem=False, distill=False)
        s = cfg.settings()
        assert not s.use_uem and not s.distill and s.use_focal


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny") / "d"
    build_dataset(8, 2, seed=11, out_dir=out, config=GenConfig())
    return out / "manifest.jsonl"


@pytest.fixture(scope="module")
def tiny_teacher(tiny_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_teacher")
    cfg = TrainConfig(stage="teacher", manifest=str(tiny_dataset),
                      out_ckpt=str(out / "t.ckpt"), epochs=2, seed=0)
    return train_teacher(cfg)


class TestTrainTeacher:
    def test_writes_checkpoint_and_runlog(self, tiny_teacher):
        result = tiny_teacher
        assert result.steps == 4
        info = verify_checkpoint(result.ckpt_path)
        assert info["role"] == "teacher"
        assert info["step"] == 4
        rows = read_runlog(result.runlog_path)
        assert [r["step"] for r in rows] == [1, 2, 3, 4]

    def test_distill_columns_stay_zero(self, tiny_teacher):
        for row in read_runlog(tiny_teacher.runlog_path):
            assert row["l_umr"] == row["l_umf"] == row["l_focal"] == row["p_d"] == 0.0
            assert row["total"] == row["l_b"]

    def test_seconds_zero_without_timing_flag(self, tiny_teacher):
        assert all(r["seconds"] == 0.0 for r in read_runlog(tiny_teacher.runlog_path))

    def test_rerun_same_seed_bit_identical_runlog(self, tiny_teacher, tiny_dataset,
                                                  tmp_path):
        cfg = TrainConfig(stage="teacher", manifest=str(tiny_dataset),
                          out_ckpt=str(tmp_path / "t2.ckpt"), epochs=2, seed=0)
        result = train_teacher(cfg)
        first = open(tiny_teacher.runlog_path, "rb").read()
        second = open(result.runlog_path, "rb").read()
        assert first == second

    def test_different_seed_changes_losses(self, tiny_teacher, tiny_dataset, tmp_path):
        cfg = TrainConfig(stage="teacher", manifest=str(tiny_dataset),
                          out_ckpt=str(tmp_path / "t3.ckpt"), epochs=2, seed=1)
        result = train_teacher(cfg)
        assert result.breakdowns[0].l_b != tiny_teacher.breakdowns[0].l_b

    def test_wrong_stage_rejected(self, tiny_dataset, tmp_path):
        cfg = TrainConfig(stage="student", manifest=str(tiny_dataset),
                          out_ckpt=str(tmp_path / "x.ckpt"), teacher_ckpt="t.ckpt")
        with pytest.raises(ConfigError, match="stage"):
            train_teacher(cfg)

    def test_checkpoint_roundtrip_preserves_eval_loss(self, tiny_teacher, tiny_dataset):
        # reloaded weights are float32-rounded, so the loss moves by at most
        # a few parts in 1e4
        samples = load_split(str(tiny_dataset), "test")
        left = batch_to_tensor([s.left for s in samples])
        right = batch_to_tensor([s.right for s in samples])
        gt = Tensor(np.stack([s.depth_gt[None] for s in samples]))

        fresh = silog_loss(teacher_forward(left, right, tiny_teacher.params).depth, gt)
        loaded, _ = load_checkpoint(tiny_teacher.ckpt_path)
        stored = silog_loss(teacher_forward(left, right, loaded).depth, gt)
        rel = abs(float(fresh.data) - float(stored.data)) / abs(float(fresh.data))
        assert rel < 1e-4

    def test_descent_on_64_sample_set(self, tmp_path):
        out = tmp_path / "d"
        build_dataset(64, 1, seed=5, out_dir=out, config=GenConfig())
        cfg = TrainConfig(stage="teacher", manifest=str(out / "manifest.jsonl"),
                          out_ckpt=str(tmp_path / "t.ckpt"), epochs=13,
                          max_steps=200, batch_size=4, learning_rate=1e-3, seed=0)
        result = train_teacher(cfg)
        assert result.steps == 200
        first = result.breakdowns[0].l_b
        final = result.breakdowns[-1].l_b
        assert final < 0.5 * first


class TestTrainStudent:
    def test_full_run_bookkeeping(self, tiny_dataset, tiny_teacher, tmp_path):
        cfg = TrainConfig(stage="student", manifest=str(tiny_dataset),
                          out_ckpt=str(tmp_path / "s.ckpt"),
                          teacher_ckpt=tiny_teacher.ckpt_path, epochs=2, seed=0)
        result = train_student(cfg)
        info = verify_checkpoint(result.ckpt_path)
        assert info["role"] == "student"
        rows = read_runlog(result.runlog_path)
        assert len(rows) == 4
        for bd in result.breakdowns:
            assert bd.total == ((bd.l_b + 0.9 * bd.l_umr) + 0.6 * bd.l_umf) \
                + 0.8 * bd.l_focal
            assert 0.0 < bd.p_d <= 1.0

    def test_teacher_checksum_survives_student_training(self, tiny_dataset,
                                                        tiny_teacher, tmp_path):
        before, _ = load_checkpoint(tiny_teacher.ckpt_path)
        checksum = before.checksum()
        cfg = TrainConfig(stage="student", manifest=str(tiny_dataset),
                          out_ckpt=str(tmp_path / "s.ckpt"),
                          teacher_ckpt=tiny_teacher.ckpt_path, epochs=1, seed=0)
        train_student(cfg)
        after, _ = load_checkpoint(tiny_teacher.ckpt_path)
        assert after.checksum() == checksum

    def test_baseline_skips_distillation_terms(self, tiny_dataset, tiny_teacher,
                                               tmp_path):
        cfg = TrainConfig(stage="student", manifest=str(tiny_dataset),
                          out_ckpt=str(tmp_path / "b.ckpt"),
                          teacher_ckpt=tiny_teacher.ckpt_path, epochs=1, seed=0,
                          distill=False)
        result = train_student(cfg)
        for row in read_runlog(result.runlog_path):
            assert row["l_umr"] == row["l_umf"] == row["l_focal"] == row["p_d"] == 0.0

    def test_student_checkpoint_rejected_as_teacher(self, tiny_dataset, tiny_teacher,
                                                    tmp_path):
        s_cfg = TrainConfig(stage="student", manifest=str(tiny_dataset),
                            out_ckpt=str(tmp_path / "s.ckpt"),
                            teacher_ckpt=tiny_teacher.ckpt_path, epochs=1, seed=0)
        student = train_student(s_cfg)
        bad = TrainConfig(stage="student", manifest=str(tiny_dataset),
                          out_ckpt=str(tmp_path / "s2.ckpt"),
                          teacher_ckpt=student.ckpt_path, epochs=1, seed=0)
        with pytest.raises(CheckpointError, match="role"):
            train_student(bad)

    def test_divergence_aborts_without_checkpoint(self, tiny_dataset, tiny_teacher,
                                                  tmp_path):
        ckpt = tmp_path / "diverged.ckpt"
        cfg = TrainConfig(stage="student", manifest=str(tiny_dataset),
                          out_ckpt=str(ckpt), teacher_ckpt=tiny_teacher.ckpt_path,
                          epochs=1, seed=0, learning_rate=1e15)
        with np.errstate(all="ignore"):
            with pytest.raises((NumericsError, ValueError)):
                train_student(cfg)
        assert not ckpt.exists()

    def test_rerun_same_seed_bit_identical_runlog(self, tiny_dataset, tiny_teacher,
                                                  tmp_path):
        logs = []
        for tag in ("a", "b"):
            cfg = TrainConfig(stage="student", manifest=str(tiny_dataset),
                              out_ckpt=str(tmp_path / f"{tag}.ckpt"),
                              teacher_ckpt=tiny_teacher.ckpt_path, epochs=2, seed=3)
            result = train_student(cfg)
            logs.append(open(result.runlog_path, "rb").read())
        assert logs[0] == logs[1]

    def test_inlier_rate_trends_up_over_training(self, tiny_dataset, tmp_path):
        # as the student locks onto the teacher the focal gate's inlier
        # rate should drift upward: median of the last tenth of the p_d
        # trace above the median of the first tenth
        t_cfg = TrainConfig(stage="teacher", manifest=str(tiny_dataset),
                            out_ckpt=str(tmp_path / "t.ckpt"), epochs=30, seed=0)
        teacher = train_teacher(t_cfg)
        s_cfg = TrainConfig(stage="student", manifest=str(tiny_dataset),
                            out_ckpt=str(tmp_path / "s.ckpt"),
                            teacher_ckpt=teacher.ckpt_path, epochs=50, seed=0)
        result = train_student(s_cfg)
        trace = [bd.p_d for bd in result.breakdowns]
        k = max(1, len(trace) // 10)
        assert statistics.median(trace[-k:]) > statistics.median(trace[:k])


class TestRunLog:
    def test_header_fixed(self):
        assert RUNLOG_HEADER == "step,l_b,l_umr,l_umf,l_focal,p_d,total,seconds"

    def test_read_rejects_other_headers(self, tmp_path):
        p = tmp_path / "r.csv"
        p.write_text("step,loss\n1,2\n")
        with pytest.raises(ValueError, match="header"):
            read_runlog(p)
