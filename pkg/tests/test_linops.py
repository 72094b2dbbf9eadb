"""
Tests for the linear degradation operators.
"""

import pytest
import numpy as np

from nrlg.errors import (
    CapabilityError,
    DomainError,
    FormatError,
    ShapeMismatchError,
    SingularSystemError,
)
from nrlg.io import make_rng
from nrlg.linops import (
    AvgPoolOperator,
    BlockCSOperator,
    DenseOperator,
    IdentityOperator,
    MaskOperator,
    OperatorDescriptor,
    build_operator,
    gaussian_kernel,
    load_kernel_file,
)


SHAPE = (16, 16, 2)

DESCRIPTORS = [
    "identity",
    "mask:keep=0.5,seed=3",
    "cs:ratio=0.25,block=8,seed=1",
    "gaussian_blur:size=5,std=10",
    {"kind": "motion_blur", "params": {"kernel_values": [[0.0, 0.2, 0.5], [0.1, 0.6, 0.1],
                                                          [0.5, 0.2, 0.0]]}},
    "avgpool:factor=4",
    "bicubic:factor=4",
    "dense:rows=40,seed=2",
]

SVD_DESCRIPTORS = [d for d in DESCRIPTORS if not str(d).startswith("bicubic")]


def _ids(descriptors):
    return [d if isinstance(d, str) else d["kind"] for d in descriptors]


def _relative(a, b):
    return np.linalg.norm(np.ravel(a - b)) / max(np.linalg.norm(np.ravel(b)), 1e-300)


class TestApplyAdjoint:
    """Test application and adjoint consistency."""

    @pytest.mark.parametrize("descriptor", DESCRIPTORS, ids=_ids(DESCRIPTORS))
    def test_adjoint_consistency(self, descriptor):
        """<Ax, y> = <x, A^T y> on 32 random probe pairs."""
        op = build_operator(descriptor, SHAPE)
        rng = make_rng(0)
        for _ in range(32):
            x = rng.standard_normal(op.input_shape)
            y = rng.standard_normal(op.output_shape)
            lhs = np.vdot(op.apply(x), y)
            rhs = np.vdot(x, op.adjoint(y))
            assert abs(lhs - rhs) <= 1e-10 * max(abs(lhs), abs(rhs), 1.0)

    @pytest.mark.parametrize("descriptor", DESCRIPTORS, ids=_ids(DESCRIPTORS))
    def test_linear_and_zero_preserving(self, descriptor):
        op = build_operator(descriptor, SHAPE)
        rng = make_rng(1)
        x1, x2 = rng.standard_normal(SHAPE), rng.standard_normal(SHAPE)
        np.testing.assert_allclose(op.apply(2.0 * x1 - x2), 2.0 * op.apply(x1) - op.apply(x2),
                                   atol=1e-12)
        assert np.all(op.apply(np.zeros(SHAPE)) == 0)

    def test_identity(self, rng):
        op = IdentityOperator(SHAPE)
        x = rng.standard_normal(SHAPE)
        np.testing.assert_array_equal(op.apply(x), x)
        np.testing.assert_array_equal(op.adjoint(x), x)

    def test_square_cs_preserves_norm(self, rng):
        """CS at ratio 1 is an orthogonal map."""
        op = BlockCSOperator((16, 16, 1), ratio=1.0, block=8, seed=7)
        x = rng.standard_normal((16, 16, 1))
        assert np.linalg.norm(op.apply(x)) == pytest.approx(np.linalg.norm(x), rel=1e-12)

    def test_cs_rows_orthonormal(self):
        """A A^T = I_M for block CS."""
        op = BlockCSOperator((16, 16, 1), ratio=0.25, block=8, seed=3)
        A = op.to_dense()
        np.testing.assert_allclose(A @ A.T, np.eye(A.shape[0]), atol=1e-10)

    def test_cs_measurement_count(self):
        op = BlockCSOperator((32, 32, 3), ratio=0.05, block=32, seed=7)
        assert op.m == 51
        assert op.output_shape == (3, 1, 1, 51)

    def test_cs_seed_reproducible(self):
        a = BlockCSOperator((16, 16, 1), ratio=0.1, block=8, seed=5)
        b = BlockCSOperator((16, 16, 1), ratio=0.1, block=8, seed=5)
        c = BlockCSOperator((16, 16, 1), ratio=0.1, block=8, seed=6)
        np.testing.assert_array_equal(a.rows, b.rows)
        assert not np.array_equal(a.rows, c.rows)

    def test_blur_keeps_constant_image(self):
        """The normalized 5x5 kernel leaves constant images unchanged."""
        op = build_operator("gaussian_blur:size=5,std=10", SHAPE)
        x = np.full(SHAPE, 0.3)
        np.testing.assert_allclose(op.apply(x), x, atol=1e-14)

    def test_gaussian_kernel_sums_to_one(self):
        kernel = gaussian_kernel(5, 10.0)
        assert kernel.shape == (5, 5)
        assert kernel.sum() == pytest.approx(1.0)
        np.testing.assert_allclose(kernel, kernel.T)

    def test_avgpool_adjoint_matches_dense_transpose(self, rng):
        """Each coarse value spreads over its block scaled by 1/s^2."""
        op = AvgPoolOperator((8, 8, 1), factor=4)
        A = op.to_dense()
        y = rng.standard_normal(op.output_shape)
        np.testing.assert_allclose(op.adjoint(y).ravel(), A.T @ y.ravel(), atol=1e-14)
        np.testing.assert_allclose(op.adjoint(np.ones(op.output_shape)), np.full((8, 8, 1), 1 / 16))

    def test_mask_adjoint(self):
        """Zeros at masked positions, measurements at kept positions."""
        op = MaskOperator.random((8, 8, 1), keep=0.5, seed=0)
        y = np.arange(1, op.output_dim + 1, dtype=np.float64)
        back = op.adjoint(y)
        assert np.all(back[~op.keep] == 0)
        np.testing.assert_array_equal(back[op.keep], y)
        assert op.output_dim == 32

    def test_shape_mismatch(self):
        op = IdentityOperator((4, 4, 1))
        with pytest.raises(ShapeMismatchError):
            op.apply(np.zeros((4, 5, 1)))

    def test_flat_input_accepted(self, rng):
        op = IdentityOperator((4, 4, 1))
        x = rng.standard_normal(16)
        assert op.apply(x).shape == (4, 4, 1)


class TestKernelSolve:
    """Test (c A A^T + sigma2 I)^-1 r."""

    @pytest.mark.parametrize("descriptor", ["identity", "cs:ratio=0.5,block=8,seed=2"])
    def test_orthonormal_rows(self, descriptor, rng):
        """v = r / (c + sigma2) when A A^T = I."""
        op = build_operator(descriptor, (16, 16, 1))
        r = rng.standard_normal(op.output_shape)
        np.testing.assert_allclose(op.kernel_solve(0.7, 0.01, r), r / 0.71, rtol=1e-14)

    def test_dense_matches_explicit_inverse(self, rng):
        op = DenseOperator.random(12, (20,), seed=4)
        A = op.matrix
        r = rng.standard_normal(12)
        expected = np.linalg.solve(0.3 * A @ A.T + 0.05 * np.eye(12), r)
        np.testing.assert_allclose(op.kernel_solve(0.3, 0.05, r), expected, rtol=1e-10)
        np.testing.assert_allclose(op.kernel_solve(0.3, 0.05, r, method="iterative", tol=1e-12),
                                   expected, rtol=1e-8)

    @pytest.mark.parametrize("descriptor", DESCRIPTORS, ids=_ids(DESCRIPTORS))
    def test_residual(self, descriptor, rng):
        """Every solve path leaves a small relative residual."""
        op = build_operator(descriptor, SHAPE)
        r = rng.standard_normal(op.output_shape)
        c, sigma2 = 1.5, 0.0025
        v = op.kernel_solve(c, sigma2, r)
        residual = c * op.gram(v) + sigma2 * v - r
        assert np.linalg.norm(residual) <= 1e-7 * np.linalg.norm(r)

    def test_iterative_agrees_with_direct(self, rng):
        op = build_operator("gaussian_blur:size=5,std=10", (16, 16, 1))
        r = rng.standard_normal(op.output_shape)
        direct = op.kernel_solve(2.0, 0.01, r, method="direct")
        iterative = op.kernel_solve(2.0, 0.01, r, method="iterative", tol=1e-12)
        assert _relative(iterative, direct) <= 1e-8

    def test_zero_system_is_singular(self, rng):
        op = IdentityOperator((4, 4, 1))
        with pytest.raises(SingularSystemError):
            op.kernel_solve(0.0, 0.0, np.ones((4, 4, 1)))

    def test_negative_scale(self):
        op = IdentityOperator((4, 4, 1))
        with pytest.raises(DomainError):
            op.kernel_solve(-1.0, 0.1, np.ones((4, 4, 1)))

    def test_direct_without_closed_form(self):
        op = build_operator("bicubic:factor=4", (16, 16, 1))
        with pytest.raises(CapabilityError):
            op.kernel_solve(1.0, 0.1, np.ones(op.output_shape), method="direct")

    def test_zero_scale_divides_by_sigma2(self):
        op = build_operator("bicubic:factor=4", (16, 16, 1))
        r = np.ones(op.output_shape)
        np.testing.assert_array_equal(op.kernel_solve(0.0, 0.5, r), r / 0.5)


class TestSvdFactors:
    """Test implicit SVD factors."""

    @pytest.mark.parametrize("descriptor", SVD_DESCRIPTORS, ids=_ids(SVD_DESCRIPTORS))
    def test_factors_reproduce_operator(self, descriptor):
        op = build_operator(descriptor, SHAPE)
        factors = op.svd_factors()
        rng = make_rng(2)
        for _ in range(5):
            x = rng.standard_normal(SHAPE)
            assert _relative(factors.reconstruct(x).reshape(op.output_shape), op.apply(x)) <= 1e-8

    @pytest.mark.parametrize("descriptor", SVD_DESCRIPTORS, ids=_ids(SVD_DESCRIPTORS))
    def test_factors_orthogonal(self, descriptor):
        """V^H V = I and U^H U = I on random probes."""
        op = build_operator(descriptor, SHAPE)
        factors = op.svd_factors()
        rng = make_rng(3)
        x = rng.standard_normal(SHAPE)
        coef = factors.v_adjoint(x)
        assert coef.size == op.input_dim
        assert np.linalg.norm(coef) == pytest.approx(np.linalg.norm(x), rel=1e-10)
        assert _relative(np.real(factors.v_apply(coef)).reshape(SHAPE), x) <= 1e-10

        s = rng.standard_normal(factors.rank_dim)
        assert _relative(factors.u_adjoint(factors.u_apply(s)), s) <= 1e-10

    def test_identity_values(self):
        factors = IdentityOperator((4, 4, 1)).svd_factors()
        np.testing.assert_array_equal(factors.singular_values, np.ones(16))

    def test_avgpool_values_match_dense_svd(self):
        op = AvgPoolOperator((8, 8, 1), factor=4)
        values = op.svd_factors().singular_values
        np.testing.assert_allclose(values, np.full(4, 0.25))
        dense_values = np.linalg.svd(op.to_dense(), compute_uv=False)
        np.testing.assert_allclose(dense_values, values, atol=1e-12)

    def test_blur_spectrum_matches_dense_svd(self):
        """DFT magnitudes equal the dense singular values as a multiset."""
        op = build_operator("gaussian_blur:size=5,std=10", (8, 8, 1))
        values = np.sort(op.svd_factors().singular_values)
        dense = np.sort(np.linalg.svd(op.to_dense(), compute_uv=False))
        np.testing.assert_allclose(values, dense, atol=1e-10)

    def test_dense_values_nonincreasing(self):
        values = DenseOperator.random(12, (20,), seed=1).svd_factors().singular_values
        assert np.all(np.diff(values) <= 0)

    def test_bicubic_has_no_svd(self):
        op = build_operator("bicubic:factor=4", (16, 16, 1))
        assert not op.has_svd
        with pytest.raises(CapabilityError):
            op.svd_factors()


class TestDescriptors:
    """Test descriptor text and records."""

    def test_parse_and_format(self):
        d = OperatorDescriptor.parse("cs:ratio=0.05,block=32,seed=7")
        assert d.kind == "cs"
        assert d.params == {"ratio": 0.05, "block": 32, "seed": 7}
        assert d.format() == "cs:ratio=0.05,block=32,seed=7"
        assert OperatorDescriptor.from_dict(d.to_dict()) == d

    def test_operator_descriptor_rebuilds(self, rng):
        op = build_operator("mask:keep=0.3,seed=9", SHAPE)
        again = build_operator(op.descriptor.to_dict(), SHAPE)
        x = rng.standard_normal(SHAPE)
        np.testing.assert_array_equal(op.apply(x), again.apply(x))

    @pytest.mark.parametrize("text", ["", "warp", "cs:ratio"])
    def test_bad_descriptors(self, text):
        with pytest.raises(DomainError):
            OperatorDescriptor.parse(text)

    def test_missing_required_parameter(self):
        with pytest.raises(DomainError):
            build_operator("cs", SHAPE)

    def test_indivisible_blocks(self):
        with pytest.raises(DomainError):
            build_operator("cs:ratio=0.1,block=32", (16, 16, 1))

    def test_bad_record(self):
        with pytest.raises(FormatError):
            OperatorDescriptor.from_dict({"params": {}})


class TestKernelFiles:
    """Test motion kernels loaded from text files."""

    @pytest.fixture
    def kernel_file(self, tmp_path):
        path = tmp_path / "motion.txt"
        path.write_text("3 3\n0 0 1\n0 2 0\n1 0 0\n")
        return path

    def test_load(self, kernel_file):
        kernel = load_kernel_file(kernel_file)
        np.testing.assert_array_equal(kernel, [[0, 0, 1], [0, 2, 0], [1, 0, 0]])

    def test_descriptor_records_checksum_and_values(self, kernel_file, rng):
        """Replay from the record works after the file is gone."""
        op = build_operator(f"motion_blur:kernel={kernel_file}", SHAPE)
        params = op.descriptor.params
        assert len(params["kernel_xxh64"]) == 16
        np.testing.assert_array_equal(params["kernel_values"], [[0, 0, 1], [0, 2, 0], [1, 0, 0]])
        np.testing.assert_allclose(op.kernel, [[0, 0, 0.25], [0, 0.5, 0], [0.25, 0, 0]])

        record = op.descriptor.to_dict()
        kernel_file.unlink()
        again = build_operator(record, SHAPE)
        x = rng.standard_normal(SHAPE)
        np.testing.assert_allclose(again.apply(x), op.apply(x), atol=1e-14)

    def test_changed_file_detected(self, kernel_file):
        op = build_operator(f"motion_blur:kernel={kernel_file}", SHAPE)
        digest = op.descriptor.params["kernel_xxh64"]
        kernel_file.write_text("3 3\n1 0 0\n0 2 0\n0 0 1\n")
        with pytest.raises(FormatError):
            build_operator(f"motion_blur:kernel={kernel_file},kernel_xxh64={digest}", SHAPE)

    @pytest.mark.parametrize("text", ["", "3\n1 2 3\n", "2 2\n1 2\n", "2 2\n1 2\n3 x\n",
                                      "2 2\n1 2\n3\n"])
    def test_malformed(self, tmp_path, text):
        path = tmp_path / "bad.txt"
        path.write_text(text)
        with pytest.raises(FormatError):
            load_kernel_file(path)
