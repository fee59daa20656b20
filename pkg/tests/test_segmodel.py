import numpy as np
import pytest

from rddlab import autodiff as ad
from rddlab import segmodel as sm
from rddlab.autodiff import DiffTensor


def tiny_spec(**kw):
    base = dict(stages=[(4, 1), (6, 2)], num_classes=5, has_aux_head=True)
    base.update(kw)
    return sm.ModelSpec(**base)


class TestBuild:
    def test_deterministic(self):
        a, b = sm.build(tiny_spec(), 3), sm.build(tiny_spec(), 3)
        for (na, ta), (nb, tb) in zip(a, b):
            assert na == nb
            assert ta.data.tobytes() == tb.data.tobytes()

    def test_seed_matters(self):
        a, b = sm.build(tiny_spec(), 1), sm.build(tiny_spec(), 2)
        assert not np.array_equal(a["stage0.conv0.weight"].data, b["stage0.conv0.weight"].data)

    def test_head_channels(self):
        p = sm.build(tiny_spec(), 0)
        assert p["head.weight"].shape[0] == 5
        assert p["aux_head.weight"].shape[0] == 5

    def test_parameter_count_by_hand(self):
        # stage0: 3->4 (3x3), stage1: 4->6, 6->6; head 6->5, aux 4->5 (1x1)
        expected = (4 * 3 * 9 + 4) + (6 * 4 * 9 + 6) + (6 * 6 * 9 + 6) + (5 * 6 + 5) + (5 * 4 + 5)
        assert sm.build(tiny_spec(), 0).count() == expected

    def test_default_teacher_bigger_than_student(self):
        assert sm.build(sm.TEACHER_SPEC, 0).count() > sm.build(sm.STUDENT_SPEC, 0).count()

    def test_init_scale_and_zero_bias(self):
        spec = sm.ModelSpec(stages=[(64, 1), (64, 1)], num_classes=2, input_channels=32)
        p = sm.build(spec, 0)
        w = p["stage1.conv0.weight"].data
        assert w.var() == pytest.approx(2.0 / (64 * 9), rel=0.05)
        assert not p["stage0.conv0.bias"].data.any()

    @pytest.mark.parametrize(
        "kw",
        [dict(stages=[(4, 1)]), dict(num_classes=1), dict(stages=[(0, 1), (4, 1)]), dict(upsample="cubic"),
         dict(output_stride=3), dict(output_stride=4)],
    )
    def test_invalid_spec(self, kw):
        with pytest.raises(ValueError):
            sm.build(tiny_spec(**kw), 0)


class TestForward:
    def test_shapes_and_aux(self):
        p = sm.build(tiny_spec(), 0)
        x = np.random.default_rng(0).random((2, 3, 8, 8))
        out = sm.forward(p, x, want_aux=True)
        assert out.primary.shape == (2, 5, 8, 8)
        assert out.auxiliary.shape == out.primary.shape
        assert sm.forward(p, x, want_aux=False).auxiliary is None

    def test_student_has_no_aux(self):
        p = sm.build(sm.STUDENT_SPEC, 0)
        out = sm.forward(p, np.zeros((1, 3, 16, 16)), want_aux=True)
        assert out.auxiliary is None

    def test_zero_params_give_uniform_softmax(self):
        p = sm.build(tiny_spec(), 0)
        for _, t in p:
            t.data[:] = 0.0
        out = sm.forward(p, np.random.default_rng(1).random((1, 3, 8, 8)))
        assert not out.primary.data.any()
        probs = np.exp(ad.log_softmax(out.primary, axis=1).data)
        np.testing.assert_allclose(probs, 0.2, rtol=0, atol=1e-15)

    def test_deterministic(self):
        p = sm.build(sm.TEACHER_SPEC, 0)
        x = np.random.default_rng(2).random((1, 3, 16, 16))
        a, b = sm.forward(p, x), sm.forward(p, x)
        assert a.primary.data.tobytes() == b.primary.data.tobytes()
        assert a.auxiliary.data.tobytes() == b.auxiliary.data.tobytes()

    @pytest.mark.parametrize("os_, expected", [(None, 8), (8, 8), (4, 4), (1, 1)])
    def test_output_stride(self, os_, expected):
        spec = tiny_spec(stages=[(2, 1), (2, 1), (2, 1), (2, 1)], output_stride=os_)
        assert spec.downsample_factor == expected
        _, feats = sm.forward(sm.build(spec, 0), np.zeros((1, 3, 16, 16)), return_features=True)
        sizes = [f.shape[2] for f in feats]
        assert sizes[-1] == 16 // expected
        assert sizes == sorted(sizes, reverse=True)

    def test_default_teacher_stride(self):
        assert sm.TEACHER_SPEC.downsample_factor == sm.STUDENT_SPEC.downsample_factor == 4

    def test_indivisible_size(self):
        p = sm.build(tiny_spec(), 0)
        with pytest.raises(ad.ShapeError, match="divisible"):
            sm.forward(p, np.zeros((1, 3, 7, 7)))

    def test_one_pixel_affine_chain(self):
        spec = sm.ModelSpec(stages=[(2, 1), (2, 1)], num_classes=2, has_aux_head=True,
                            kernel_size=1, output_stride=1)
        p = sm.build(spec, 4)
        x = np.array([0.2, -0.5, 0.9])
        W0 = p["stage0.conv0.weight"].data[:, :, 0, 0]
        W1 = p["stage1.conv0.weight"].data[:, :, 0, 0]
        Wh = p["head.weight"].data[:, :, 0, 0]
        Wa = p["aux_head.weight"].data[:, :, 0, 0]
        b0, b1 = np.array([0.1, -0.2]), np.array([0.05, 0.3])
        p["stage0.conv0.bias"].data[:] = b0
        p["stage1.conv0.bias"].data[:] = b1
        h0 = np.maximum(W0 @ x + b0, 0)
        h1 = np.maximum(W1 @ h0 + b1, 0)
        out = sm.forward(p, x.reshape(1, 3, 1, 1), want_aux=True)
        np.testing.assert_allclose(out.primary.data.ravel(), Wh @ h1, rtol=1e-15, atol=1e-15)
        np.testing.assert_allclose(out.auxiliary.data.ravel(), Wa @ h0, rtol=1e-15, atol=1e-15)

    @pytest.mark.parametrize("mode", ["nearest", "bilinear"])
    def test_upsample_gradients(self, mode):
        rng = np.random.default_rng(0)
        x = DiffTensor(rng.normal(size=(1, 2, 3, 3)), requires_grad=True)
        w = DiffTensor(rng.normal(size=(1, 2, 6, 6)))
        report = ad.grad_check(lambda x: ad.sum(ad.mul(sm.upsample(x, 2, mode), w)), [x])
        assert report.passed

    def test_nearest_upsample_values(self):
        x = DiffTensor(np.arange(4.0).reshape(1, 1, 2, 2))
        up = sm.upsample(x, 2).data[0, 0]
        np.testing.assert_array_equal(up, np.kron(np.arange(4.0).reshape(2, 2), np.ones((2, 2))))

    def test_bilinear_preserves_constants(self):
        x = DiffTensor(np.full((1, 2, 4, 4), 3.0))
        np.testing.assert_allclose(sm.upsample(x, 4, "bilinear").data, 3.0, rtol=0, atol=1e-14)


class TestSGD:
    def _params_with_grad(self, g):
        p = sm.build(tiny_spec(), 0)
        for _, t in p:
            t.grad = np.full(t.shape, g)
        return p

    def test_zero_lr(self):
        p = self._params_with_grad(1.0)
        before = {n: t.data.copy() for n, t in p}
        sm.sgd_step(p, 0.0)
        for n, t in p:
            np.testing.assert_array_equal(t.data, before[n])
            assert t.grad is None

    def test_plain_step(self):
        p = self._params_with_grad(0.5)
        before = {n: t.data.copy() for n, t in p}
        sm.sgd_step(p, 0.1, momentum=0.0, weight_decay=0.0)
        for n, t in p:
            np.testing.assert_array_equal(t.data, before[n] - 0.1 * 0.5)

    def test_two_step_momentum(self):
        p = self._params_with_grad(2.0)
        w0 = p["head.weight"].data.copy()
        sm.sgd_step(p, 0.1, momentum=0.9, weight_decay=0.0)
        for _, t in p:
            t.grad = np.full(t.shape, 2.0)
        sm.sgd_step(p, 0.1, momentum=0.9, weight_decay=0.0)
        np.testing.assert_allclose(p["head.weight"].data, w0 - 0.1 * (2.0 + 1.9 * 2.0), rtol=0, atol=1e-14)

    def test_weight_decay_enters_velocity(self):
        p = self._params_with_grad(0.0)
        w0 = p["head.weight"].data.copy()
        sm.sgd_step(p, 0.5, momentum=0.9, weight_decay=0.1)
        np.testing.assert_allclose(p["head.weight"].data, w0 - 0.5 * 0.1 * w0, rtol=1e-15)

    def test_missing_grad_names_parameter(self):
        p = self._params_with_grad(1.0)
        p["aux_head.bias"].grad = None
        with pytest.raises(RuntimeError, match="aux_head.bias"):
            sm.sgd_step(p, 0.1)


class TestPolyLR:
    def test_endpoints(self):
        assert sm.poly_lr(0, 100, 0.02) == 0.02
        assert sm.poly_lr(100, 100, 0.02) == 0.0

    def test_midpoint(self):
        assert sm.poly_lr(50, 100, 0.02) == pytest.approx(0.0107177346253629, rel=1e-12)

    def test_zero_total(self):
        with pytest.raises(ValueError):
            sm.poly_lr(0, 0, 0.02)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        p = sm.build(sm.TEACHER_SPEC, 7)
        path = sm.save_checkpoint(p, tmp_path / "t.ckpt")
        q = sm.load_checkpoint(path)
        assert q.spec == p.spec
        for (na, ta), (nb, tb) in zip(p, q):
            assert na == nb and ta.data.tobytes() == tb.data.tobytes()

    def test_byte_stable(self, tmp_path):
        p = sm.build(sm.STUDENT_SPEC, 1)
        a = sm.save_checkpoint(p, tmp_path / "a.ckpt").read_bytes()
        b = sm.save_checkpoint(sm.load_checkpoint(tmp_path / "a.ckpt"), tmp_path / "b.ckpt").read_bytes()
        assert a == b
        assert a[:8] == b"RDDCKPT\x00"

    def test_rejects_garbage(self, tmp_path):
        (tmp_path / "x.ckpt").write_bytes(b"not a checkpoint")
        with pytest.raises(ValueError):
            sm.load_checkpoint(tmp_path / "x.ckpt")
