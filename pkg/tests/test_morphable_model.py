import numpy as np
import pytest

from conftest import random_basis
from depthlip.errors import FormatError
from depthlip.morphable_model import (BasisSet, ExpressionCoeffs, ExpressionTrack,
                                      IdentityCoeffs, load_basis, load_expression_track,
                                      load_identity_csv, reconstruct_shape, swap_expression,
                                      write_basis, write_coeff_csv)


def dense_oracle(basis, alpha, beta):
    """Independent reconstruction: plain per-coordinate loops."""
    n3 = basis.mean_shape.size
    flat = np.empty(n3)
    for i in range(n3):
        acc = basis.mean_shape[i]
        for j in range(basis.id_dim):
            acc += basis.id_basis[i, j] * alpha[j]
        for j in range(basis.exp_dim):
            acc += basis.exp_basis[i, j] * beta[j]
        flat[i] = acc
    return flat.reshape(-1, 3)


def test_basis_roundtrip_bitwise(rng, tmp_path):
    basis = random_basis(rng, f32=True)
    path = tmp_path / "toy.dlb"
    write_basis(path, basis)
    loaded = load_basis(path)
    assert np.array_equal(loaded.mean_shape, basis.mean_shape)
    assert np.array_equal(loaded.id_basis, basis.id_basis)
    assert np.array_equal(loaded.exp_basis, basis.exp_basis)
    assert np.array_equal(loaded.triangles, basis.triangles)


def test_load_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.dlb"
    path.write_bytes(b"NOPE\n3 2 2\n")
    with pytest.raises(FormatError):
        load_basis(path)


def test_load_rejects_short_payload(tmp_path):
    # header says N=10 but only 3*9 floats of mean payload follow
    path = tmp_path / "short.dlb"
    payload = np.zeros(27, dtype="<f4").tobytes()
    path.write_bytes(b"DLB1\n10 0 0\n" + payload)
    with pytest.raises(FormatError, match="truncated"):
        load_basis(path)


def test_load_rejects_trailing_garbage(rng, tmp_path):
    basis = random_basis(rng, f32=True)
    path = tmp_path / "trail.dlb"
    write_basis(path, basis)
    with open(path, "ab") as f:
        f.write(b"\x00")
    with pytest.raises(FormatError, match="trailing"):
        load_basis(path)


def test_toy_header_echo(rng, tmp_path):
    basis = random_basis(rng, n=3, d_id=2, d_exp=2, f32=True)
    path = tmp_path / "toy.dlb"
    write_basis(path, basis)
    assert load_basis(path).vertex_count == 3


def test_full_scale_dim_gate(rng, tmp_path):
    toy = random_basis(rng, n=4, d_id=2, d_exp=2, f32=True)
    path = tmp_path / "toy.dlb"
    write_basis(path, toy)
    with pytest.raises(FormatError, match="full-scale mode"):
        load_basis(path, full_scale=True)
    full = random_basis(rng, n=5, d_id=80, d_exp=64, f32=True)
    write_basis(path, full)
    loaded = load_basis(path, full_scale=True)
    mesh = reconstruct_shape(loaded, IdentityCoeffs(np.zeros(80)), ExpressionCoeffs(np.zeros(64)))
    assert mesh.vertices.shape == (5, 3)


def test_zero_coeffs_give_mean_shape(rng):
    basis = random_basis(rng)
    mesh = reconstruct_shape(basis, IdentityCoeffs(np.zeros(basis.id_dim)),
                             ExpressionCoeffs(np.zeros(basis.exp_dim)))
    assert np.array_equal(mesh.vertices, basis.mean_shape.reshape(-1, 3))


def test_dimension_mismatch_rejected(rng):
    basis = random_basis(rng, d_id=3, d_exp=2)
    with pytest.raises(ValueError, match="identity"):
        reconstruct_shape(basis, IdentityCoeffs(np.zeros(4)), ExpressionCoeffs(np.zeros(2)))
    with pytest.raises(ValueError, match="expression"):
        reconstruct_shape(basis, IdentityCoeffs(np.zeros(3)), ExpressionCoeffs(np.zeros(5)))


def test_reconstruct_matches_dense_oracle(rng):
    for _ in range(20):
        basis = random_basis(rng)
        alpha = rng.normal(size=basis.id_dim)
        beta = rng.normal(size=basis.exp_dim)
        mesh = reconstruct_shape(basis, IdentityCoeffs(alpha), ExpressionCoeffs(beta))
        want = dense_oracle(basis, alpha, beta)
        scale = np.abs(want).max() + 1.0
        assert np.abs(mesh.vertices - want).max() / scale < 1e-12


def test_swap_with_same_expression_is_identity(rng):
    basis = random_basis(rng)
    alpha = IdentityCoeffs(rng.normal(size=basis.id_dim))
    beta = ExpressionCoeffs(rng.normal(size=basis.exp_dim))
    a = reconstruct_shape(basis, alpha, beta)
    b = swap_expression(basis, alpha, beta)
    assert np.array_equal(a.vertices, b.vertices)


def test_swap_delta_is_exp_basis_delta(rng):
    for _ in range(10):
        basis = random_basis(rng)
        alpha = IdentityCoeffs(rng.normal(size=basis.id_dim))
        b1 = rng.normal(size=basis.exp_dim)
        b2 = rng.normal(size=basis.exp_dim)
        m1 = swap_expression(basis, alpha, ExpressionCoeffs(b1))
        m2 = swap_expression(basis, alpha, ExpressionCoeffs(b2))
        want = (basis.exp_basis @ (b1 - b2)).reshape(-1, 3)
        scale = np.abs(want).max() + 1.0
        assert np.abs((m1.vertices - m2.vertices) - want).max() / scale < 1e-12


def test_track_meshes_stay_in_exp_column_space(rng):
    basis = random_basis(rng, n=12, d_id=3, d_exp=4)
    alpha = IdentityCoeffs(rng.normal(size=3))
    identity_mesh = reconstruct_shape(basis, alpha, ExpressionCoeffs(np.zeros(4)))
    track = ExpressionTrack(
        frames=[ExpressionCoeffs(rng.normal(size=4)) for _ in range(10)], frame_rate=25.0)
    for beta in track.frames:
        mesh = swap_expression(basis, alpha, beta)
        delta = (mesh.vertices - identity_mesh.vertices).reshape(-1)
        # least-squares residual onto the expression column space must vanish
        coef, *_ = np.linalg.lstsq(basis.exp_basis, delta, rcond=None)
        residual = delta - basis.exp_basis @ coef
        assert np.abs(residual).max() < 1e-9


def test_linearity_in_identity_coeffs(rng):
    for _ in range(10):
        basis = random_basis(rng)
        a1 = rng.normal(size=basis.id_dim)
        a2 = rng.normal(size=basis.id_dim)
        beta = ExpressionCoeffs(rng.normal(size=basis.exp_dim))
        m_sum = reconstruct_shape(basis, IdentityCoeffs(a1 + a2), beta)
        m_base = reconstruct_shape(basis, IdentityCoeffs(a1), beta)
        want = (basis.id_basis @ a2).reshape(-1, 3)
        assert np.abs((m_sum.vertices - m_base.vertices) - want).max() < 1e-10


def test_homogeneity_about_mean(rng):
    basis = random_basis(rng)
    alpha = rng.normal(size=basis.id_dim)
    beta = rng.normal(size=basis.exp_dim)
    mean = basis.mean_shape.reshape(-1, 3)
    base = reconstruct_shape(basis, IdentityCoeffs(alpha), ExpressionCoeffs(beta))
    for c in (-1.5, 0.25, 3.0):
        scaled = reconstruct_shape(basis, IdentityCoeffs(c * alpha), ExpressionCoeffs(c * beta))
        assert np.allclose(scaled.vertices - mean, c * (base.vertices - mean),
                           rtol=0, atol=1e-10)


def test_reconstruction_is_deterministic(rng):
    basis = random_basis(rng)
    alpha = IdentityCoeffs(rng.normal(size=basis.id_dim))
    beta = ExpressionCoeffs(rng.normal(size=basis.exp_dim))
    a = reconstruct_shape(basis, alpha, beta)
    b = reconstruct_shape(basis, alpha, beta)
    assert np.array_equal(a.vertices, b.vertices)


def test_triangle_index_validation():
    with pytest.raises(ValueError, match="triangle"):
        BasisSet(mean_shape=np.zeros(9), id_basis=np.zeros((9, 1)),
                 exp_basis=np.zeros((9, 1)), triangles=[(0, 1, 3)])


def test_identity_csv_requires_single_row(tmp_path):
    path = tmp_path / "id.csv"
    write_coeff_csv(path, [np.arange(4.0), np.arange(4.0)])
    with pytest.raises(FormatError, match="exactly one row"):
        load_identity_csv(path)


def test_coeff_csv_roundtrip(rng, tmp_path):
    rows = rng.normal(size=(5, 6))
    path = tmp_path / "expr.csv"
    write_coeff_csv(path, rows)
    track = load_expression_track(path, frame_rate=25.0)
    assert len(track) == 5
    for got, want in zip(track.frames, rows):
        assert np.array_equal(got.values, want)


def test_expression_track_rejects_mixed_dims():
    with pytest.raises(ValueError, match="inconsistent"):
        ExpressionTrack(frames=[ExpressionCoeffs(np.zeros(3)), ExpressionCoeffs(np.zeros(4))])
