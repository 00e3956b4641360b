import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import fd_gradient, max_rel_err, naive_conv, naive_patches, patch_multiplicity
from rapa.convkernel import (
    ConvGeometry,
    KernelMatrix,
    PatchMatrix,
    col2im,
    conv_backward_input,
    conv_backward_kernel,
    conv_forward,
    im2col,
    mac_count,
)
from rapa.numcore import SeededRng, ShapeError


def geom(h=3, w=3, c_in=1, k=2, pad=0, stride=1, c_out=1):
    return ConvGeometry(h=h, w=w, c_in=c_in, k_h=k, k_w=k, pad=pad, stride=stride, c_out=c_out)


# Geometry strategy: random extents with a square-divisibility guarantee.
@st.composite
def geometries(draw):
    k = draw(st.sampled_from([1, 2, 3, 5]))
    stride = draw(st.sampled_from([1, 2]))
    pad = draw(st.sampled_from([0, 2]))
    steps_h = draw(st.integers(1, 5))
    steps_w = draw(st.integers(1, 5))
    h = k + stride * (steps_h - 1) - 2 * pad
    w = k + stride * (steps_w - 1) - 2 * pad
    if h < 1 or w < 1:
        h, w = h + 2 * pad, w + 2 * pad
        pad = 0
    c_in = draw(st.integers(1, 3))
    c_out = draw(st.integers(1, 4))
    return ConvGeometry(h=h, w=w, c_in=c_in, k_h=k, k_w=k, pad=pad, stride=stride, c_out=c_out)


class TestConvGeometry:
    def test_derived_extents(self):
        g = ConvGeometry(h=32, w=32, c_in=3, k_h=5, k_w=5, pad=2, stride=1, c_out=32)
        assert (g.out_h, g.out_w) == (32, 32)
        assert g.n_p == 1024
        assert g.k == 75

    def test_non_integral_extent_rejected(self):
        with pytest.raises(ShapeError, match="divisible"):
            ConvGeometry(h=5, w=5, c_in=1, k_h=2, k_w=2, pad=0, stride=2, c_out=1)

    def test_kernel_too_large(self):
        with pytest.raises(ShapeError):
            ConvGeometry(h=2, w=2, c_in=1, k_h=5, k_w=5, pad=0, stride=1, c_out=1)


class TestIm2col:
    def test_enumerated_3x3(self):
        # Frozen from the patch-enumeration oracle.
        image = np.arange(1.0, 10.0).reshape(3, 3, 1)
        g = geom()
        want = naive_patches(image, 2, 2, 0, 1)
        np.testing.assert_array_equal(
            want, [[1, 2, 4, 5], [2, 3, 5, 6], [4, 5, 7, 8], [5, 6, 8, 9]]
        )
        np.testing.assert_array_equal(im2col(image, g).rows, want)

    def test_1x1_kernel_identity_patching(self, rng):
        image = rng.normal(0, 1, (4, 5, 3))
        g = ConvGeometry(h=4, w=5, c_in=3, k_h=1, k_w=1, pad=0, stride=1, c_out=2)
        np.testing.assert_array_equal(im2col(image, g).rows, image.reshape(20, 3))

    def test_zero_input(self):
        g = geom()
        assert not im2col(np.zeros((3, 3, 1)), g).rows.any()

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError, match="does not match geometry"):
            im2col(np.zeros((4, 4, 1)), geom())

    def test_padded_entries_are_zero(self, rng):
        image = rng.normal(1, 1, (3, 3, 1))
        g = geom(pad=1, k=3)
        rows = im2col(image, g).rows
        np.testing.assert_allclose(rows, naive_patches(image, 3, 3, 1, 1))

    @settings(max_examples=25, deadline=None)
    @given(geometries(), st.integers(0, 2**32 - 1))
    def test_matches_enumeration_oracle(self, g, seed):
        image = SeededRng(seed).normal(0, 1, (g.h, g.w, g.c_in))
        got = im2col(image, g)
        assert got.rows.shape == (g.n_p, g.k)
        np.testing.assert_allclose(
            got.rows, naive_patches(image, g.k_h, g.k_w, g.pad, g.stride), atol=0
        )


class TestConvForward:
    def test_hand_summed(self):
        image = np.arange(1.0, 10.0).reshape(3, 3, 1)
        g = geom()
        kernel = KernelMatrix(weights=np.ones((4, 1)), bias=np.zeros(1))
        out = conv_forward(im2col(image, g), kernel)
        np.testing.assert_array_equal(out[:, :, 0], [[12, 16], [24, 28]])

    def test_zero_kernel_constant_bias(self, rng):
        image = rng.normal(0, 1, (3, 3, 1))
        g = geom(c_out=3)
        kernel = KernelMatrix(weights=np.zeros((4, 3)), bias=np.array([1.0, -2.0, 0.5]))
        out = conv_forward(im2col(image, g), kernel)
        np.testing.assert_array_equal(out, np.broadcast_to([1.0, -2.0, 0.5], (2, 2, 3)))

    def test_brute_force_8x8x3(self):
        g = ConvGeometry(h=8, w=8, c_in=3, k_h=3, k_w=3, pad=0, stride=1, c_out=4)
        for trial in range(20):
            r = SeededRng(trial)
            image = r.normal(0, 1, (8, 8, 3))
            kernel = KernelMatrix(
                weights=r.normal(0, 1, (g.k, g.c_out)), bias=r.normal(0, 1, g.c_out)
            )
            got = conv_forward(im2col(image, g), kernel)
            want = naive_conv(image, kernel.weights, kernel.bias, 3, 3, 0, 1)
            assert max_rel_err(got, want) < 1e-12

    @settings(max_examples=20, deadline=None)
    @given(geometries(), st.integers(0, 2**32 - 1))
    def test_equals_sliding_window(self, g, seed):
        r = SeededRng(seed)
        image = r.normal(0, 1, (g.h, g.w, g.c_in))
        kernel = KernelMatrix(
            weights=r.normal(0, 1, (g.k, g.c_out)), bias=r.normal(0, 1, g.c_out)
        )
        got = conv_forward(im2col(image, g), kernel)
        want = naive_conv(image, kernel.weights, kernel.bias, g.k_h, g.k_w, g.pad, g.stride)
        assert max_rel_err(got, want) < 1e-12


class TestConvBackward:
    def test_zero_grad(self, rng):
        g = geom()
        patches = im2col(rng.normal(0, 1, (3, 3, 1)), g)
        dw, db = conv_backward_kernel(patches, np.zeros((4, 1)))
        assert not dw.any() and not db.any()
        dx = conv_backward_input(np.zeros((4, 1)), KernelMatrix(np.ones((4, 1)), np.zeros(1)), g)
        assert not dx.any()

    def test_rank_one(self):
        g = ConvGeometry(h=2, w=2, c_in=1, k_h=2, k_w=2, pad=0, stride=1, c_out=3)
        patches = PatchMatrix(geometry=g, rows=np.array([[1.0, 2.0, 3.0, 4.0]]))
        grad = np.array([[5.0, 6.0, 7.0]])
        dw, db = conv_backward_kernel(patches, grad)
        np.testing.assert_array_equal(dw, np.outer([1, 2, 3, 4], [5, 6, 7]))
        np.testing.assert_array_equal(db, [5, 6, 7])

    def test_1x1_no_overlap_input_grad(self, rng):
        g = ConvGeometry(h=3, w=3, c_in=2, k_h=1, k_w=1, pad=0, stride=1, c_out=4)
        kernel = KernelMatrix(rng.normal(0, 1, (2, 4)), rng.normal(0, 1, 4))
        grad = rng.normal(0, 1, (9, 4))
        dx = conv_backward_input(grad, kernel, g)
        np.testing.assert_allclose(dx, (grad @ kernel.weights.T).reshape(3, 3, 2))

    def _loss(self, image, weights, bias, g, proj_out):
        kernel = KernelMatrix(weights=weights, bias=bias)
        out = conv_forward(im2col(image, g), kernel)
        return float((out * proj_out).sum())

    def test_kernel_grad_finite_differences(self):
        g = ConvGeometry(h=8, w=8, c_in=3, k_h=3, k_w=3, pad=1, stride=1, c_out=2)
        r = SeededRng(5)
        image = r.normal(0, 1, (8, 8, 3))
        weights = r.normal(0, 1, (g.k, g.c_out))
        bias = r.normal(0, 1, g.c_out)
        proj = r.normal(0, 1, (g.out_h, g.out_w, g.c_out))
        patches = im2col(image, g)
        dw, db = conv_backward_kernel(patches, proj.reshape(g.n_p, g.c_out))
        fd_w = fd_gradient(lambda w: self._loss(image, w, bias, g, proj), weights)
        fd_b = fd_gradient(lambda b: self._loss(image, weights, b, g, proj), bias)
        assert max_rel_err(dw, fd_w, floor=1e-4) < 1e-6
        assert max_rel_err(db, fd_b, floor=1e-4) < 1e-6

    def test_input_grad_finite_differences(self):
        g = ConvGeometry(h=8, w=8, c_in=3, k_h=3, k_w=3, pad=1, stride=1, c_out=2)
        r = SeededRng(6)
        image = r.normal(0, 1, (8, 8, 3))
        kernel = KernelMatrix(r.normal(0, 1, (g.k, g.c_out)), r.normal(0, 1, g.c_out))
        proj = r.normal(0, 1, (g.out_h, g.out_w, g.c_out))
        dx = conv_backward_input(proj.reshape(g.n_p, g.c_out), kernel, g)
        fd_x = fd_gradient(
            lambda im: self._loss(im, kernel.weights, kernel.bias, g, proj), image
        )
        assert max_rel_err(dx, fd_x, floor=1e-4) < 1e-6

    @settings(max_examples=10, deadline=None)
    @given(geometries(), st.integers(0, 2**32 - 1))
    def test_fd_across_geometries(self, g, seed):
        r = SeededRng(seed)
        image = r.normal(0, 1, (g.h, g.w, g.c_in))
        weights = r.normal(0, 1, (g.k, g.c_out))
        bias = r.normal(0, 1, g.c_out)
        proj = r.normal(0, 1, (g.out_h, g.out_w, g.c_out))
        patches = im2col(image, g)
        dw, _ = conv_backward_kernel(patches, proj.reshape(g.n_p, g.c_out))
        fd_w = fd_gradient(lambda w: self._loss(image, w, bias, g, proj), weights)
        assert max_rel_err(dw, fd_w, floor=1e-3) < 1e-5

    def test_col2im_multiplicity(self):
        g = ConvGeometry(h=6, w=7, c_in=2, k_h=3, k_w=3, pad=1, stride=1, c_out=1)
        ones = np.ones((g.n_p, g.k))
        got = col2im(ones, g)
        want = patch_multiplicity(6, 7, 2, 3, 3, 1, 1)
        np.testing.assert_array_equal(got, want)


class TestMacCount:
    def test_reference_layer1(self):
        g = ConvGeometry(h=32, w=32, c_in=3, k_h=5, k_w=5, pad=2, stride=1, c_out=32)
        assert mac_count(g) == 1024 * 75 * 32 == 2_457_600

    def test_reference_layer2(self):
        g = ConvGeometry(h=16, w=16, c_in=32, k_h=5, k_w=5, pad=2, stride=1, c_out=32)
        assert mac_count(g) == 256 * 800 * 32 == 6_553_600

    def test_reference_layer3(self):
        # n_p * k * c_out = 64 * 800 * 64; frozen from the product oracle.
        g = ConvGeometry(h=8, w=8, c_in=32, k_h=5, k_w=5, pad=2, stride=1, c_out=64)
        assert mac_count(g) == 64 * 800 * 64 == 3_276_800

    def test_unit(self):
        g = ConvGeometry(h=1, w=1, c_in=1, k_h=1, k_w=1, pad=0, stride=1, c_out=1)
        assert mac_count(g) == 1
