"""Tests for the teacher/student networks, pooling, and the margin loss."""

import math

import numpy as np
import pytest

from xvkd import autodiff as ad
from xvkd.autodiff import Parameter, Tensor, grad_check
from oracles import student_param_oracle
from xvkd.models import (
    AamConfig,
    ConfigurationError,
    StudentModel,
    TeacherModel,
    aam_loss,
    attentive_stats_pool,
    count_params,
    param_digest,
    student_forward,
    teacher_forward,
)


@pytest.fixture(scope="module")
def small_teacher():
    return TeacherModel(n_speakers=3, seed=7)


class TestTeacherForward:
    def test_output_shapes_for_200_frames(self, small_teacher):
        rng = np.random.default_rng(0)
        out = teacher_forward(small_teacher, rng.normal(size=(200, 40)))
        assert out.tdnn[3].shape == (200, 512)
        assert out.tdnn[4].shape == (200, 1500)
        assert out.pooled.shape == (3000,)
        assert out.fc1.shape == (512,)
        assert out.fc2.shape == (512,)

    def test_single_frame_std_component_is_zero(self, small_teacher):
        rng = np.random.default_rng(1)
        out = teacher_forward(small_teacher, rng.normal(size=(1, 40)))
        np.testing.assert_allclose(out.pooled.data[:1500], out.tdnn[4].data[0], atol=1e-12)
        np.testing.assert_allclose(out.pooled.data[1500:], 0.0, atol=1e-4)

    def test_batched_forward_matches_single(self, small_teacher):
        rng = np.random.default_rng(2)
        feats = rng.normal(size=(3, 24, 40))
        batched = teacher_forward(small_teacher, feats)
        for i in range(3):
            single = teacher_forward(small_teacher, feats[i])
            np.testing.assert_allclose(batched.fc1.data[i], single.fc1.data, atol=1e-9)
            np.testing.assert_allclose(batched.tdnn[4].data[i], single.tdnn[4].data, atol=1e-9)

    def test_one_by_one_context_layers_commute_with_permutation(self, small_teacher):
        """Layers 4 and 5 are frame-local: permuting their input permutes
        their output identically."""
        rng = np.random.default_rng(3)
        out = teacher_forward(small_teacher, rng.normal(size=(12, 40)))
        h3 = out.tdnn[2].data
        perm = rng.permutation(12)

        def run_tail(h):
            x = Tensor(h)
            for name in ("tdnn4", "tdnn5"):
                x = ad.tdnn_conv(
                    x,
                    small_teacher.params[name + ".weight"],
                    small_teacher.params[name + ".bias"],
                    (0,),
                )
                x = ad.relu(x)
                x = ad.batch_norm(
                    x,
                    small_teacher.params[name + ".bn.gamma"],
                    small_teacher.params[name + ".bn.beta"],
                    small_teacher.buffers[name + ".bn.running_mean"],
                    small_teacher.buffers[name + ".bn.running_var"],
                    training=False,
                )
            return x.data

        np.testing.assert_allclose(run_tail(h3[perm]), run_tail(h3)[perm], atol=1e-10)

    def test_early_context_layers_are_not_permutation_equivariant(self, small_teacher):
        rng = np.random.default_rng(4)
        feats = rng.normal(size=(12, 40))
        perm = rng.permutation(12)
        out = teacher_forward(small_teacher, feats)
        out_p = teacher_forward(small_teacher, feats[perm])
        assert not np.allclose(out_p.tdnn[1].data, out.tdnn[1].data[perm], atol=1e-6)

    def test_pooling_permutation_invariant_without_context(self):
        teacher = TeacherModel(n_speakers=3, seed=11, contexts=[(0,)] * 5)
        rng = np.random.default_rng(5)
        feats = rng.normal(size=(20, 40))
        perm = rng.permutation(20)
        a = teacher_forward(teacher, feats).pooled.data
        b = teacher_forward(teacher, feats[perm]).pooled.data
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_rejects_wrong_feature_width(self, small_teacher):
        with pytest.raises(ConfigurationError):
            teacher_forward(small_teacher, np.zeros((10, 39)))

    def test_grad_check_full_teacher_with_margin_loss(self, small_teacher):
        rng = np.random.default_rng(6)
        feats = rng.normal(size=(16, 40))
        cfg = AamConfig(n_speakers=3)

        def loss():
            out = teacher_forward(small_teacher, feats, training=True)
            return aam_loss(out.fc2, [1], cfg, small_teacher.params["head.weight"])

        err = grad_check(loss, small_teacher.parameters(), max_entries=2, seed=0)
        assert err < 1e-4


class TestAttentiveStatsPool:
    def pool_params(self, rng, d, hidden=4):
        return (
            Parameter("w", rng.normal(size=(d, hidden))),
            Parameter("b", rng.normal(size=(hidden,))),
            Parameter("v", rng.normal(size=(hidden, 1))),
        )

    def test_constant_frames_give_mean_and_zero_std(self):
        rng = np.random.default_rng(7)
        c = rng.normal(size=3)
        w, b, v = self.pool_params(rng, 3)
        out = attentive_stats_pool(Tensor(np.tile(c, (6, 1))), w, b, v).data
        np.testing.assert_allclose(out[:3], c, atol=1e-12)
        np.testing.assert_allclose(out[3:], 0.0, atol=1e-4)

    def test_zero_attention_reduces_to_plain_statistics(self):
        rng = np.random.default_rng(8)
        h = rng.normal(size=(9, 3))
        w = Parameter("w", np.zeros((3, 4)))
        b = Parameter("b", np.zeros(4))
        v = Parameter("v", np.zeros((4, 1)))
        out = attentive_stats_pool(Tensor(h), w, b, v).data
        np.testing.assert_allclose(out[:3], h.mean(axis=0), atol=1e-12)
        np.testing.assert_allclose(
            out[3:], np.sqrt((h**2).mean(axis=0) - h.mean(axis=0) ** 2), atol=1e-9
        )

    def test_two_frame_hand_case(self):
        # uniform attention over [0, 2]: mean 1, E[h^2] = 2, std 1
        w = Parameter("w", np.zeros((1, 2)))
        b = Parameter("b", np.zeros(2))
        v = Parameter("v", np.zeros((2, 1)))
        out = attentive_stats_pool(Tensor([[0.0], [2.0]]), w, b, v).data
        np.testing.assert_allclose(out, [1.0, 1.0], atol=1e-9)

    def test_std_components_nonnegative(self):
        rng = np.random.default_rng(9)
        for _ in range(5):
            h = rng.normal(size=(7, 4))
            w, b, v = self.pool_params(rng, 4)
            out = attentive_stats_pool(Tensor(h), w, b, v).data
            assert (out[4:] >= 0.0).all()

    def test_gradients(self):
        rng = np.random.default_rng(10)
        h = Parameter("h", rng.normal(size=(5, 3)))
        w, b, v = self.pool_params(rng, 3)
        target = rng.normal(size=6)
        err = grad_check(
            lambda: (attentive_stats_pool(h, w, b, v) * target).sum(), [h, w, b, v]
        )
        assert err < 1e-4


class TestAamLoss:
    def aligned_setup(self):
        # class-0 weight parallel to the embedding, class-1 orthogonal
        weight = Parameter("head", np.array([[1.0, 0.0], [0.0, 1.0]]))
        embedding = Tensor([1.0, 0.0])
        return embedding, weight

    def test_zero_margin_matches_cross_entropy_oracle(self):
        rng = np.random.default_rng(11)
        emb = rng.normal(size=(4, 8))
        weight = rng.normal(size=(8, 5))
        labels = np.array([0, 2, 4, 1])
        cfg = AamConfig(n_speakers=5, margin=0.0, scale=30.0)
        loss = aam_loss(Tensor(emb), labels, cfg, Tensor(weight)).item()
        e = emb / np.linalg.norm(emb, axis=1, keepdims=True)
        w = weight / np.linalg.norm(weight, axis=0, keepdims=True)
        logits = 30.0 * np.clip(e @ w, -1 + 1e-7, 1 - 1e-7)
        shifted = logits - logits.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        oracle = -logp[np.arange(4), labels].mean()
        assert abs(loss - oracle) < 1e-9

    def test_aligned_two_class_value(self):
        embedding, weight = self.aligned_setup()
        cfg = AamConfig(n_speakers=2, margin=0.0, scale=1.0)
        loss = aam_loss(embedding, [0], cfg, weight).item()
        assert abs(loss - (-math.log(math.e / (math.e + 1.0)))) < 1e-6

    def test_margin_increases_loss(self):
        embedding, weight = self.aligned_setup()
        no_margin = aam_loss(
            embedding, [0], AamConfig(n_speakers=2, margin=0.0, scale=1.0), weight
        ).item()
        with_margin = aam_loss(
            embedding, [0], AamConfig(n_speakers=2, margin=0.3, scale=1.0), weight
        ).item()
        assert with_margin > no_margin

    def test_loss_nonnegative(self):
        rng = np.random.default_rng(12)
        cfg = AamConfig(n_speakers=6)
        for _ in range(10):
            emb = rng.normal(size=(3, 8))
            weight = rng.normal(size=(8, 6))
            labels = rng.integers(0, 6, size=3)
            assert aam_loss(Tensor(emb), labels, cfg, Tensor(weight)).item() >= 0.0

    def test_label_out_of_range_rejected(self):
        embedding, weight = self.aligned_setup()
        cfg = AamConfig(n_speakers=2)
        with pytest.raises(ValueError, match="label"):
            aam_loss(embedding, [5], cfg, weight)

    def test_gradients(self):
        rng = np.random.default_rng(13)
        emb = Parameter("emb", rng.normal(size=(3, 6)))
        weight = Parameter("head", rng.normal(size=(6, 4)))
        cfg = AamConfig(n_speakers=4)
        labels = [0, 3, 1]
        err = grad_check(lambda: aam_loss(emb, labels, cfg, weight), [emb, weight])
        assert err < 1e-4

    def test_config_validation(self):
        with pytest.raises(ValueError):
            AamConfig(n_speakers=4, margin=2.0)
        with pytest.raises(ValueError):
            AamConfig(n_speakers=4, scale=0.0)


class TestStudent:
    def test_duplicated_frame_duplicates_output(self):
        student = StudentModel(d_out=16, seed=3)
        rng = np.random.default_rng(14)
        x = rng.normal(size=(5, 40))
        x[3] = x[1]
        out = student_forward(student, x).data
        np.testing.assert_array_equal(out[3], out[1])

    def test_zero_input_rows_identical(self):
        student = StudentModel(d_out=8, seed=4)
        out = student_forward(student, np.zeros((6, 40))).data
        for t in range(1, 6):
            np.testing.assert_array_equal(out[t], out[0])

    def test_frame_locality_under_masking(self):
        student = StudentModel(d_out=8, seed=5)
        rng = np.random.default_rng(15)
        x = rng.normal(size=(7, 40))
        before = student_forward(student, x).data[2].copy()
        x[5] = 0.0
        after = student_forward(student, x).data[2]
        np.testing.assert_array_equal(after, before)

    def test_exactly_eight_affine_layers(self):
        student = StudentModel(d_out=512)
        weights = [n for n in student.params if n.endswith(".weight")]
        assert len(weights) == 8
        assert student.params["layer1.weight"].shape == (40, 256)
        for i in range(2, 8):
            assert student.params[f"layer{i}.weight"].shape == (256, 256)
        assert student.params["layer8.weight"].shape == (256, 512)

    @pytest.mark.parametrize(
        "d_out,expected",
        [(512, 536_832), (1024, 668_416), (1500, 790_748), (4060, 1_448_668)],
    )
    def test_param_counts_match_closed_form(self, d_out, expected):
        assert student_param_oracle(d_out) == expected
        assert count_params(StudentModel(d_out=d_out)) == expected


class TestCounts:
    def test_teacher_backbone_count(self, small_teacher):
        assert small_teacher.param_count(include_head=False) == 4_707_476

    def test_teacher_head_included_when_asked(self, small_teacher):
        assert small_teacher.param_count(include_head=True) == 4_707_476 + 512 * 3

    def test_param_digest_changes_with_parameters(self):
        a = StudentModel(d_out=8, seed=0)
        b = StudentModel(d_out=8, seed=0)
        assert param_digest(a) == param_digest(b)
        b.params["layer1.weight"].data[0, 0] += 1.0
        assert param_digest(a) != param_digest(b)
