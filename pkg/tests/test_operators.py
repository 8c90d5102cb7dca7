import numpy as np
import pytest
from hypothesis import given, settings
from _audit import adjoint_error, operator_matrix
from hypothesis import strategies as st

from diffunfold.numerics import Rng, finite_difference_gradient, relative_error
from diffunfold.operators import (BlurOperator, DenseOperator, IdentityOperator, MaskSpec, OperatorFormatError,
                                  data_fidelity_gradient, estimate_normal_norm, load_operator, make_coil_maps,
                                  make_gaussian_blur, make_inpainting, make_mask, make_mri, make_superres, measure,
                                  operator_from_blob, operator_to_blob, save_operator)

SHAPE = (1, 16, 16)


OPS = operator_matrix(SHAPE)


@pytest.mark.parametrize("name", sorted(OPS))
def test_adjoint_identity(name):
    op, rng = OPS[name], Rng(7)
    worst = max(adjoint_error(op, rng) for _ in range(50))
    assert worst < 1e-10


@pytest.mark.parametrize("name", sorted(OPS))
def test_linearity(name):
    op, rng = OPS[name], Rng(8)
    x1, x2 = rng.normal(op.input_shape), rng.normal(op.input_shape)
    a, b = 1.7, -0.3
    np.testing.assert_allclose(op.apply(a * x1 + b * x2), a * op.apply(x1) + b * op.apply(x2), atol=1e-10)


@pytest.mark.parametrize("name", sorted(OPS))
def test_batch_axes_and_shapes(name):
    op = OPS[name]
    x = Rng(1).normal((3,) + op.input_shape)
    y = op.apply(x)
    assert y.shape == (3,) + op.output_shape
    assert op.adjoint(y).shape == x.shape
    np.testing.assert_allclose(op.normal(x), op.adjoint(op.apply(x)), atol=1e-12)


@pytest.mark.parametrize("name", ["identity", "blur_iso", "superres2", "inpaint0.2", "mri_gaussian1d_4"])
def test_shape_mismatch_raises(name):
    op = OPS[name]
    with pytest.raises(ValueError):
        op.apply(np.zeros((5, 5)))
    with pytest.raises(ValueError):
        op.adjoint(np.zeros((5, 5)))


def test_delta_kernel_blur_is_identity():
    k = np.zeros((3, 3))
    k[1, 1] = 1.0
    op = BlurOperator(k, SHAPE)
    x = Rng(2).normal(SHAPE)
    np.testing.assert_allclose(op.apply(x), x, atol=1e-14)


def test_inpaint_zero_drop_is_identity():
    op = make_inpainting(0.0, SHAPE, Rng(0))
    x = Rng(3).normal(SHAPE)
    np.testing.assert_array_equal(op.apply(x), x)


def test_superres_constant_and_checkerboard():
    op = make_superres(4, shape=SHAPE)
    np.testing.assert_allclose(op.apply(np.full(SHAPE, 0.3)), np.full((1, 4, 4), 0.3), atol=1e-15)
    board = (np.indices((16, 16)).sum(axis=0) % 2).astype(float)[None]
    np.testing.assert_allclose(make_superres(2, shape=SHAPE).apply(board), np.full((1, 8, 8), 0.5))


def test_superres_factor_one_and_scaled_isometry():
    x = Rng(4).normal(SHAPE)
    np.testing.assert_array_equal(make_superres(1, shape=SHAPE).apply(x), x)
    for f in (2, 4):
        op = make_superres(f, shape=SHAPE)
        u = Rng(f).normal(op.output_shape)
        np.testing.assert_allclose(op.apply(op.adjoint(u)), u / f ** 2, atol=1e-14)


def test_superres_rejects_non_dividing_factor():
    with pytest.raises(ValueError):
        make_superres(3, shape=SHAPE)


def test_inpaint_adjoint_is_zero_filled_embedding():
    op = OPS["inpaint0.6"]
    u = Rng(5).normal(SHAPE)
    np.testing.assert_array_equal(op.adjoint(u), np.where(op.mask, u, 0.0))
    x = Rng(6).normal(SHAPE)
    np.testing.assert_array_equal(op.normal(x), op.mask * x)
    np.testing.assert_array_equal(op.normal(op.normal(x)), op.normal(x))


def test_dense_adjoint_is_transpose():
    M = Rng(9).normal((4, 3))
    op = DenseOperator(M)
    u = Rng(10).normal(4)
    np.testing.assert_array_equal(op.adjoint(u), u @ M)


def test_blur_kernel_normalised_and_isotropic():
    a = make_gaussian_blur(7, 1.3, 1.3, 0.0, shape=SHAPE)
    b = make_gaussian_blur(7, 1.3, 1.3, 1.1, shape=SHAPE)
    assert abs(a.kernel.sum() - 1) < 1e-12
    assert abs(make_gaussian_blur(9, 0.8, 2.0, 0.4, shape=SHAPE).kernel.sum() - 1) < 1e-12
    np.testing.assert_allclose(a.kernel, b.kernel, atol=1e-12)


def test_blur_rejects_even_size_and_bad_sigma():
    with pytest.raises(ValueError):
        make_gaussian_blur(4, 1.0, 1.0, shape=SHAPE)
    with pytest.raises(ValueError):
        make_gaussian_blur(5, 0.0, 1.0, shape=SHAPE)


def test_blur_spectrum_matches_fourier_probes():
    op = OPS["blur_aniso"]
    h, w = SHAPE[-2:]
    spec = op.spectrum
    yy, xx = np.mgrid[0:h, 0:w]
    for ky, kx in [(0, 0), (1, 0), (0, 3), (5, 7), (8, 8), (15, 2)]:
        phase = np.exp(2j * np.pi * (ky * yy / h + kx * xx / w))
        # complex probe = two real probes, by linearity
        out = op.apply(phase.real[None]) + 1j * op.apply(phase.imag[None])
        np.testing.assert_allclose(out[0], spec[ky, kx] * phase, atol=1e-10)


def test_data_fidelity_gradient_cases():
    rng = Rng(12)
    M = rng.normal((3, 3))
    op = DenseOperator(M)
    x = rng.normal(3)
    y = rng.normal(3)
    meas = measure(op, x, 0.0, rng)
    np.testing.assert_allclose(data_fidelity_gradient(op, x, meas), 0.0, atol=1e-15)
    from diffunfold.operators import Measurement
    m2 = Measurement(y, 0.0, op.op_id)
    np.testing.assert_allclose(data_fidelity_gradient(op, x, m2), M.T @ (M @ x - y), atol=1e-12)
    ident = IdentityOperator((3,))
    np.testing.assert_array_equal(data_fidelity_gradient(ident, x, Measurement(np.zeros(3), 0, "")), x)
    with pytest.raises(ValueError):
        data_fidelity_gradient(op, x, Measurement(np.zeros(4), 0, ""))


@pytest.mark.parametrize("name", ["blur_aniso", "superres2", "inpaint0.6", "mri_gaussian2d_4", "dense"])
def test_data_fidelity_gradient_matches_fd(name):
    op = OPS[name]
    rng = Rng(13)
    x = rng.normal(op.input_shape)
    meas = measure(op, rng.normal(op.input_shape), 0.1, rng)

    def g(v):
        return 0.5 * float(np.sum((op.apply(v) - meas.y) ** 2))

    assert relative_error(data_fidelity_gradient(op, x, meas), finite_difference_gradient(g, x)) < 1e-6


def test_measure_noise_free_and_variance():
    op = IdentityOperator((10 ** 5,))
    x = np.zeros(10 ** 5)
    assert np.array_equal(measure(OPS["blur_iso"], np.ones(SHAPE), 0.0, Rng(0)).y, OPS["blur_iso"].apply(np.ones(SHAPE)))
    y = measure(op, x, 1.0, Rng(14)).y
    assert abs(y.var() - 1) < 0.02
    with pytest.raises(ValueError):
        measure(op, x, -0.1, Rng(0))


def test_mri_measurement_zero_outside_mask():
    op = OPS["mri_uniform1d_4"]
    y = measure(op, Rng(15).normal(op.input_shape), 0.5, Rng(16)).y
    assert y.shape == op.output_shape
    assert np.all(y[:, ~op.mask, :] == 0)


def test_mri_full_mask_single_flat_coil_is_unitary():
    op = OPS["mri_full_flat"]
    x = Rng(17).normal(op.input_shape)
    assert abs(np.linalg.norm(op.apply(x)) - np.linalg.norm(x)) < 1e-10


def test_mri_full_mask_normal_is_identity_with_coils():
    op = make_mri((16, 16), 4, MaskSpec("uniform1d", 1.0), Rng(18))
    x = Rng(19).normal(op.input_shape)
    np.testing.assert_allclose(op.normal(x), x, atol=1e-10)


def test_coil_maps_sum_of_squares_is_one():
    for n in (1, 4, 15):
        maps = make_coil_maps((20, 24), n, Rng(n)).maps
        np.testing.assert_allclose(np.sum(np.abs(maps) ** 2, axis=0), 1.0, atol=1e-10)
    with pytest.raises(ValueError):
        make_coil_maps((8, 8), 0, Rng(0))


def test_uniform1d_column_count():
    mask = make_mask(MaskSpec("uniform1d", acceleration=4), (64, 64))
    cols = mask[0]
    assert np.all(mask == cols)
    assert cols[::4].all()
    assert 16 <= cols.sum() <= 16 + 5  # 8% centre band of 64 adds at most 5 columns
    assert mask.mean() >= 0.25


@pytest.mark.parametrize("spec", [MaskSpec("gaussian1d", 4, seed=1), MaskSpec("gaussian1d", 8, seed=2),
                                  MaskSpec("gaussian2d", 4, seed=3), MaskSpec("gaussian2d", 8, seed=4),
                                  MaskSpec("dust", drop_p=0.2, seed=5), MaskSpec("dust", drop_p=0.4, seed=6),
                                  MaskSpec("dust", drop_p=0.6, seed=7)])
def test_mask_fraction_within_ten_percent(spec):
    mask = make_mask(spec, (256, 256))
    realised = 1 - mask.mean() if spec.pattern == "dust" else mask.mean()
    assert abs(realised - spec.target_fraction) <= 0.1 * spec.target_fraction


def test_dust_fraction_recorded_and_reproducible():
    op = make_inpainting(0.4, (1, 256, 256), Rng(0))
    dropped = 1 - op.kept_fraction
    assert 0.35 <= dropped <= 0.65
    assert dropped == pytest.approx(0.406097412109375, abs=0)  # frozen for seed 0
    again = make_inpainting(0.4, (1, 256, 256), Rng(0))
    np.testing.assert_array_equal(op.mask, again.mask)


def test_mask_determinism_and_validation():
    s = MaskSpec("gaussian2d", 4, seed=11)
    np.testing.assert_array_equal(make_mask(s, (32, 32)), make_mask(s, (32, 32)))
    with pytest.raises(ValueError):
        MaskSpec("spiral")
    with pytest.raises(ValueError):
        make_inpainting(1.0, SHAPE, Rng(0))
    with pytest.raises(ValueError):
        MaskSpec("uniform1d", acceleration=0.5)


def test_power_iteration_estimates():
    assert estimate_normal_norm(OPS["inpaint0.2"]) == pytest.approx(1.0, rel=1e-6)
    assert estimate_normal_norm(OPS["superres2"]) == pytest.approx(0.25, rel=1e-6)
    M = OPS["dense"].matrix
    assert estimate_normal_norm(OPS["dense"], n_iter=500) == pytest.approx(np.linalg.norm(M, 2) ** 2, rel=1e-6)


@pytest.mark.parametrize("name", sorted(OPS))
def test_blob_round_trip(name, tmp_path):
    op = OPS[name]
    blob = operator_to_blob(op)
    assert blob[:4] == b"DUOP"
    back = operator_from_blob(blob)
    assert type(back) is type(op)
    assert operator_to_blob(back) == blob
    x = Rng(20).normal(op.input_shape)
    np.testing.assert_array_equal(back.apply(x), op.apply(x))
    path = tmp_path / "op.duop"
    save_operator(path, op)
    assert load_operator(path).op_id == op.op_id


def test_blob_corruption_detected():
    blob = bytearray(operator_to_blob(OPS["blur_aniso"]))
    blob[len(blob) // 2] ^= 0x01
    with pytest.raises(OperatorFormatError):
        operator_from_blob(bytes(blob))
    with pytest.raises(OperatorFormatError):
        operator_from_blob(b"NOPE" + bytes(20))


@settings(max_examples=25, deadline=None)
@given(st.sampled_from([4, 8, 12]), st.sampled_from([1, 3, 5]), st.floats(0.3, 3.0), st.floats(0.3, 3.0),
       st.floats(0, 3.14), st.integers(0, 10 ** 6))
def test_blur_adjoint_property(n, size, s1, s2, angle, seed):
    if size > n:
        return
    op = make_gaussian_blur(size, s1, s2, angle, shape=(1, n, n))
    assert adjoint_error(op, Rng(seed)) < 1e-10
