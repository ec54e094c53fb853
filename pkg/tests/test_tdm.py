import numpy as np
import pytest

from src.attention.maskgen import BlockMask
from src.distill.schedule import Schedule
from src.distill.scores import GaussianTeacher, optimal_affine_student, train_fake_score
from src.distill.student import AffineStudent, AttnStudent
from src.distill.tdm import (
    TRACE_COLUMNS,
    DistillConfig,
    ddim_transfer,
    distill,
    moment_errors,
    run_trajectory,
    tdm_gradient,
)
from src.tensor.core import RngStream
from src.utils.errors import NumericalDivergenceError, ValidationError


def one_stage_gradient(w: float, batch: int = 20_000):
    sched = Schedule.uniform("rectified_flow", 1, 4)
    teacher = GaussianTeacher(0.0, 1.0, 1, sched)
    student = AffineStudent(1, 1, params={0: {"W": [[w]], "u": [0.0]}})
    z = RngStream(0).generator().standard_normal((batch, 1))
    preds = {0: student.forward(z, 0)[0]}
    fake = train_fake_score(preds, sched, RngStream(1))
    return tdm_gradient(student, 0, z, fake, teacher, sched, RngStream(2), timesteps=[0.375])


class TestTdmGradient:
    def test_narrow_student_is_widened(self):
        assert one_stage_gradient(0.5).grads["W"][0, 0] < 0.0

    def test_wide_student_is_narrowed(self):
        assert one_stage_gradient(2.0).grads["W"][0, 0] > 0.0

    def test_matching_scores_give_zero_gradient(self):
        sched = Schedule.uniform("rectified_flow", 2, 4)
        teacher = GaussianTeacher(1.0, 2.0, 3, sched)
        student = AffineStudent(2, 3)
        x = np.random.default_rng(0).standard_normal((64, 3))
        step = tdm_gradient(student, 1, x, teacher, teacher, sched, RngStream(3), n_timesteps=2)
        assert step.grad_norm == 0.0
        assert step.timesteps.size == 2


    def test_attention_student_gradient_matches_finite_differences(self):
        sched = Schedule.uniform("rectified_flow", 2, 4)
        teacher = GaussianTeacher(1.0, 0.5, 10, sched)
        fake = GaussianTeacher(0.0, 1.0, 10, sched)
        student = AttnStudent(2, 5, 2, 3, 1, RngStream(4))
        gen = np.random.default_rng(7)
        bits = gen.random((5, 5)) < 0.5
        np.fill_diagonal(bits, True)
        bits[2] = np.eye(5, dtype=bool)[2]
        mask = BlockMask(bits)
        x = gen.standard_normal((16, 10))
        step = tdm_gradient(student, 1, x, fake, teacher, sched, RngStream(5), mask=mask, n_timesteps=2)
        assert np.any(step.cotangent != 0.0)

        def surrogate():
            y, _ = student.forward(x, 1, mask)
            return float((y * step.cotangent).sum()) / x.shape[0]

        eps = 1e-6
        for name, value in student.params[1].items():
            for _ in range(2):
                idx = tuple(int(gen.integers(0, n)) for n in value.shape)
                original = value[idx]
                value[idx] = original + eps
                up = surrogate()
                value[idx] = original - eps
                down = surrogate()
                value[idx] = original
                numeric = (up - down) / (2 * eps)
                assert step.grads[name][idx] == pytest.approx(numeric, rel=1e-4, abs=1e-7), (name, idx)


def optimal_stage_gradient_norm(batch: int, seed: int) -> float:
    sched = Schedule.uniform("rectified_flow", 2, 4)
    teacher = GaussianTeacher(3.0, 0.5, 1, sched)
    student = AffineStudent(2, 1, params=optimal_affine_student(teacher, sched))
    stream = RngStream(seed)
    z = stream.split(0).generator().standard_normal((batch, 1))
    inputs, preds, _ = run_trajectory(student, z, sched)
    fake = train_fake_score(preds, sched, stream.split(1))
    return max(
        tdm_gradient(student, s, inputs[s], fake, teacher, sched, stream.split(2).split(s), n_timesteps=4).grad_norm
        for s in range(2)
    )


class TestFixedPoint:
    def test_gradient_vanishes_as_batch_grows(self):
        norms = [np.mean([optimal_stage_gradient_norm(batch, seed) for seed in range(3)])
                 for batch in (500, 8000, 128_000)]
        assert norms[0] > norms[1] > norms[2]
        assert norms[2] < norms[0] / 4

class TestTrajectory:
    def test_ddim_transfer_keeps_noise_direction(self):
        sched = Schedule.uniform("rectified_flow", 2)
        x0 = np.array([[1.0]])
        eps = np.array([[0.5]])
        x_in = 0.5 * x0 + 0.5 * eps
        np.testing.assert_allclose(ddim_transfer(x0, x_in, 0.5, 0.25, sched), 0.75 * x0 + 0.25 * eps)

    def test_transfer_from_clean_rejected(self):
        sched = Schedule.uniform("rectified_flow", 2)
        with pytest.raises(ValidationError):
            ddim_transfer(np.zeros((1, 1)), np.zeros((1, 1)), 0.0, 0.0, sched)

    def test_optimal_student_reproduces_teacher(self):
        sched = Schedule.uniform("rectified_flow", 4)
        teacher = GaussianTeacher(3.0, 0.5, 1, sched)
        student = AffineStudent(4, 1, params=optimal_affine_student(teacher, sched))
        z = RngStream(4).generator().standard_normal((50_000, 1))
        inputs, preds, _ = run_trajectory(student, z, sched)
        assert set(inputs) == {0, 1, 2, 3}
        for stage in range(4):
            mean_err, cov_err = moment_errors(preds[stage], 3.0, 0.5)
            assert mean_err < 0.01 and cov_err < 0.01


class TestDistill:
    def test_gaussian_toy_converges(self):
        sched = Schedule.uniform("rectified_flow", 4)
        teacher = GaussianTeacher(3.0, 0.5, 1, sched)
        cfg = DistillConfig(iters=2000, progress=False)
        result = distill(teacher, cfg, RngStream(0))
        assert result.mean_rel_error < 0.05
        assert result.std_rel_error < 0.10
        assert len(result.trace) == 2000
        assert list(result.trace_frame().columns) == TRACE_COLUMNS

    def test_optimal_start_stays_put(self):
        sched = Schedule.uniform("rectified_flow", 4)
        teacher = GaussianTeacher(3.0, 0.5, 1, sched)
        student = AffineStudent(4, 1, params=optimal_affine_student(teacher, sched))
        result = distill(teacher, DistillConfig(iters=50, progress=False), RngStream(1), student=student)
        assert result.mean_rel_error < 0.05
        assert result.std_rel_error < 0.10

    def test_huge_step_diverges_with_trace(self):
        sched = Schedule.uniform("rectified_flow", 4)
        teacher = GaussianTeacher(3.0, 0.5, 1, sched)
        cfg = DistillConfig(iters=50, batch=256, lr=100.0, progress=False)
        with pytest.raises(NumericalDivergenceError) as info:
            distill(teacher, cfg, RngStream(2))
        assert isinstance(info.value.trace, list)

    def test_replay(self):
        sched = Schedule.uniform("rectified_flow", 2)
        teacher = GaussianTeacher(1.0, 1.0, 1, sched)
        cfg = DistillConfig(n_stages=2, iters=5, batch=64, eval_samples=100, progress=False)
        a = distill(teacher, cfg, RngStream(5))
        b = distill(teacher, cfg, RngStream(5))
        assert a.trace == b.trace
        assert a.final_mean == b.final_mean

    def test_attention_student_short_run(self):
        sched = Schedule.uniform("rectified_flow", 2)
        teacher = GaussianTeacher(0.0, 1.0, 16, sched)
        cfg = DistillConfig(
            n_stages=2,
            iters=5,
            batch=64,
            student="attn",
            dim=16,
            tokens=8,
            head_dim=4,
            attn_block=2,
            dense_warmup_stages=1,
            eval_samples=128,
            progress=False,
        )
        result = distill(teacher, cfg, RngStream(6))
        frame = result.trace_frame()
        assert len(frame) == 5
        assert np.all(np.isfinite(frame.to_numpy()))

    def test_stage_count_mismatch(self):
        sched = Schedule.uniform("rectified_flow", 2)
        teacher = GaussianTeacher(0.0, 1.0, 1, sched)
        with pytest.raises(ValidationError):
            distill(teacher, DistillConfig(n_stages=2, iters=1, progress=False), RngStream(0), AffineStudent(3, 1))

    def test_config_validation(self):
        with pytest.raises(ValidationError):
            DistillConfig(batch=1)
        with pytest.raises(ValidationError):
            DistillConfig(lr=-1.0)
        assert DistillConfig(student="attn").learning_rate == pytest.approx(1e-3)
