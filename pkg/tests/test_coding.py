import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import brute_force_inverse_decode, rel_err
from splitmask import coding
from splitmask.coding import (CodingScheme, VirtualBatch, constraint_residual, decode_forward, decode_grad, encode,
                              gen_scheme, grad_coefficients, identity_scheme, verify_forward, verify_grad)
from splitmask.errors import IncompleteBatchError, IntegrityNotEnabledError, SchemeGenerationError, ShapeError
from splitmask.nn import LayerSpec, linear_forward, weight_grad


def _batch(rng, K, M, shape, sigma2=1e8):
    xs = [rng.standard_normal(shape) for _ in range(K)]
    return VirtualBatch(xs, coding.draw_noise(shape, M, sigma2, rng))


def _equations(layer, scheme, enc, deltas):
    """Primary equations, then the check equations when the scheme has an extension."""
    eqs = [weight_grad(layer, g, enc[j]) for j, g in enumerate(coding.combine_gradients(deltas, scheme.B))]
    if scheme.E:
        subset, B2, _ = coding.check_grad_coefficients(scheme)
        eqs += [weight_grad(layer, g, enc[j]) for j, g in zip(subset, coding.combine_gradients(deltas, B2))]
    return eqs


# -- gen_scheme ---------------------------------------------------------------

def test_k1_scheme_is_orthogonal_and_constrained():
    s = gen_scheme(1, 1, seed=7)
    assert s.A.shape == (2, 2)
    assert np.abs(s.A.T @ s.A - np.eye(2)).max() < 1e-12
    assert s.constraint_residual() < 1e-12


def test_k2_scheme_is_orthogonal():
    s = gen_scheme(2, 1, seed=3)
    assert s.orthogonal
    assert np.abs(s.A.T @ s.A - np.eye(3)).max() < 1e-12
    assert np.linalg.cond(s.A) < 1 + 1e-10


def test_k2_m2_noise_block_norms():
    s = gen_scheme(2, 2, C_min=0.5, seed=11)
    assert s.A.shape == (4, 4)
    assert np.linalg.matrix_rank(s.A) == 4
    assert np.linalg.norm(s.A2, axis=0).min() >= 0.5 - 1e-12
    assert np.linalg.matrix_rank(s.A2) == 2
    assert s.constraint_residual() < 1e-10


@settings(max_examples=80, deadline=None)
@given(K=st.integers(1, 4), M=st.integers(1, 2), E=st.integers(0, 2), seed=st.integers(0, 2**63 - 1))
def test_scheme_invariants_property(K, M, E, seed):
    s = gen_scheme(K, M, E, C_min=0.1, seed=seed)
    assert s.constraint_residual() < 1e-10
    assert np.all(s.gamma != 0)
    assert np.all((np.abs(s.gamma) >= 0.5) & (np.abs(s.gamma) <= 2.0))
    assert np.linalg.matrix_rank(s.A2) == M
    assert np.linalg.norm(s.A2, axis=0).min() >= 0.1 - 1e-12
    assert s.E == E
    if M == 1:
        assert np.abs(s.A.T @ s.A - np.eye(K + 1)).max() < 1e-10
    if E:
        assert constraint_residual(s.full_matrix()[:, list(s.check_subset)], s.B_check, s.gamma_check, K) < 1e-10


def test_scheme_is_deterministic_and_fresh():
    a, b = gen_scheme(2, 1, 1, seed=5), gen_scheme(2, 1, 1, seed=5)
    assert np.array_equal(a.A, b.A) and np.array_equal(a.gamma, b.gamma) and np.array_equal(a.A_ext, b.A_ext)
    schemes = [gen_scheme(2, 1, seed=s) for s in range(50)]
    keys = {s.A.tobytes() for s in schemes}
    assert len(keys) == 50


def test_b_is_derived_from_a_and_gamma():
    s = gen_scheme(3, 1, seed=2)
    expected_BT = np.eye(3, 4) @ np.linalg.inv(s.A.T) @ np.diag(1 / s.gamma)
    assert np.abs(s.B.T - expected_BT).max() < 1e-12


def test_scheme_generation_failure():
    with pytest.raises(SchemeGenerationError):
        gen_scheme(2, 1, C_min=0.99, seed=0, max_retries=5)
    with pytest.raises(ValueError):
        gen_scheme(0, 1)


def test_scheme_is_read_only_and_copies_inputs():
    A = np.eye(3)
    s = CodingScheme.from_matrices(2, 1, A)
    A[0, 0] = 5.0
    assert s.A[0, 0] == 1.0
    with pytest.raises(ValueError):
        s.A[0, 0] = 2.0


def test_scheme_json_export():
    s = gen_scheme(2, 1, 1, seed=9)
    d = json.loads(s.to_json())
    assert set(["K", "M", "E", "seed", "A", "B", "Gamma", "A_ext"]) <= set(d)
    assert np.array_equal(np.array(d["A"]), s.A)  # 17 digits round-trip exactly
    assert np.array_equal(np.array(d["Gamma"]), s.gamma)


# -- encode / decode ------------------------------------------------------------

def test_identity_encoding(rng):
    b = _batch(rng, 2, 1, (4,))
    enc = encode(b, identity_scheme(2, 1)).encoded
    for e, t in zip(enc, b.inputs + b.noises):
        np.testing.assert_array_equal(e, t)


def test_cyclic_permutation_encoding(rng):
    b = _batch(rng, 2, 1, (4,))
    perm = np.roll(np.eye(3), 1, axis=1)  # encoding j takes slot j-1
    enc = encode(b, CodingScheme.from_matrices(2, 1, perm)).encoded
    expected = [b.noises[0], b.inputs[0], b.inputs[1]]
    for e, t in zip(enc, expected):
        np.testing.assert_array_equal(e, t)


def test_encode_definition(rng):
    s = gen_scheme(2, 2, 1, seed=4)
    b = _batch(rng, 2, 2, (3, 2))
    enc = encode(b, s).encoded
    Z = b.inputs + b.noises
    F = s.full_matrix()
    assert len(enc) == 5
    for j, e in enumerate(enc):
        manual = sum(F[k, j] * Z[k] for k in range(4))
        assert rel_err(e, manual) < 1e-14


def test_encode_rejects_mismatch(rng):
    with pytest.raises(ShapeError):
        encode(_batch(rng, 3, 1, (2,)), gen_scheme(2, 1))
    with pytest.raises(ShapeError):
        VirtualBatch([np.zeros(2), np.zeros(3)], [np.zeros(2)])


def test_decode_identity_passthrough(rng):
    s = identity_scheme(2, 1)
    Y = [rng.standard_normal(5) for _ in range(3)]
    out = decode_forward(Y, s)
    for o, y in zip(out, Y[:2]):
        np.testing.assert_array_equal(o, y)


def test_decode_agrees_with_generic_solver(rng):
    s = gen_scheme(3, 2, seed=8)
    Y = [rng.standard_normal(6) for _ in range(5)]
    for a, b in zip(decode_forward(Y, s), brute_force_inverse_decode(Y, s.A, 3)):
        assert rel_err(a, b) < 1e-10


def test_decode_missing_result(rng):
    s = gen_scheme(2, 1)
    with pytest.raises(IncompleteBatchError):
        decode_forward([np.zeros(2)] * 2, s)
    with pytest.raises(IncompleteBatchError):
        decode_forward([np.zeros(2), None, np.zeros(2)], s)
    with pytest.raises(IncompleteBatchError):
        decode_grad([np.zeros(2)] * 2, s)


def test_dense_pipeline_f64(rng):
    layer = LayerSpec.dense(10, 6)
    W = rng.standard_normal((6, 10))
    s = gen_scheme(2, 1, seed=1)
    b = _batch(rng, 2, 1, (10,))
    Y = [linear_forward(layer, W, e) for e in encode(b, s).encoded]
    for out, x in zip(decode_forward(Y, s), b.inputs):
        ref = linear_forward(layer, W, x)
        assert np.linalg.norm(out - ref) / np.linalg.norm(ref) < 1e-8


def test_dense_pipeline_f32_is_approximate(rng):
    layer = LayerSpec.dense(10, 6)
    W = rng.standard_normal((6, 10)).astype(np.float32)
    s = gen_scheme(2, 1, seed=1)
    xs = [rng.standard_normal(10).astype(np.float32) for _ in range(2)]
    b = VirtualBatch(xs, coding.draw_noise((10,), 1, 1e8, rng, dtype=np.float32))
    Y = [linear_forward(layer, W, e) for e in encode(b, s).encoded]
    assert Y[0].dtype == np.float32
    for out, x in zip(decode_forward(Y, s), xs):
        ref = linear_forward(layer, W.astype(np.float64), x.astype(np.float64))
        assert np.linalg.norm(out - ref) / np.linalg.norm(ref) <= 1e-2


@settings(max_examples=40, deadline=None)
@given(K=st.integers(1, 4), M=st.integers(1, 2), seed=st.integers(0, 2**32 - 1), conv=st.booleans())
def test_exact_decode_property(K, M, seed, conv):
    rng = np.random.default_rng(seed)
    if conv:
        layer, shape = LayerSpec.conv2d(2, 3, 3, 1, 1), (2, 5, 5)
    else:
        layer, shape = LayerSpec.dense(7, 4), (7,)
    W = rng.standard_normal(layer.weight_shape)
    s = gen_scheme(K, M, seed=seed)
    b = _batch(rng, K, M, shape)
    enc = encode(b, s).encoded
    Y = [linear_forward(layer, W, e) for e in enc]
    for out, x in zip(decode_forward(Y, s), b.inputs):
        assert rel_err(out, linear_forward(layer, W, x)) < 1e-8
    deltas = [rng.standard_normal(layer.output_shape(shape)) for _ in range(K)]
    dW = decode_grad(_equations(layer, s, enc, deltas), s)
    ref = sum(weight_grad(layer, d, x) for d, x in zip(deltas, b.inputs))
    assert rel_err(dW, ref) < 1e-8


# -- gradient coefficients -------------------------------------------------------

def test_grad_coefficients_k1_identity():
    B, gamma = grad_coefficients(CodingScheme.from_matrices(1, 1, np.eye(2), gamma=[1.0, 1.0]))
    np.testing.assert_array_equal(B, [[1.0], [0.0]])
    np.testing.assert_array_equal(gamma, [1.0, 1.0])


def test_grad_constraint_left_block_is_identity():
    for seed in range(20):
        s = gen_scheme(3, 2, seed=seed)
        B, gamma = grad_coefficients(s)
        M = B.T @ np.diag(gamma) @ s.A.T
        assert np.abs(M[:, :3] - np.eye(3)).max() < 1e-10
        assert np.abs(M[:, 3:]).max() < 1e-10


def test_gamma_scaling_invariance():
    s = gen_scheme(2, 1, seed=1)
    c = 3.7
    assert constraint_residual(s.A, s.B / c, s.gamma * c, 2) < 1e-12


def test_decode_grad_zero_deltas(rng):
    layer = LayerSpec.dense(3, 2)
    s = gen_scheme(2, 1, seed=0)
    enc = encode(_batch(rng, 2, 1, (3,)), s).encoded
    out = decode_grad(_equations(layer, s, enc, [np.zeros(2)] * 2), s)
    assert not out.any()


def test_decode_grad_dense_2x3(rng):
    layer = LayerSpec.dense(3, 2)
    s = gen_scheme(2, 1, seed=6)
    b = _batch(rng, 2, 1, (3,))
    enc = encode(b, s).encoded
    deltas = [rng.standard_normal(2) for _ in range(2)]
    ref = sum(weight_grad(layer, d, x) for d, x in zip(deltas, b.inputs))
    out = decode_grad(_equations(layer, s, enc, deltas), s)
    assert np.abs(out - ref).max() < 1e-9 * max(1.0, np.abs(ref).max())


def test_decode_grad_conv_k3(rng):
    layer = LayerSpec.conv2d(2, 2, 3)
    s = gen_scheme(3, 1, seed=12)
    b = _batch(rng, 3, 1, (2, 6, 6))
    enc = encode(b, s).encoded
    deltas = [rng.standard_normal((2, 4, 4)) for _ in range(3)]
    ref = sum(weight_grad(layer, d, x) for d, x in zip(deltas, b.inputs))
    assert rel_err(decode_grad(_equations(layer, s, enc, deltas), s), ref) < 1e-8


# -- integrity --------------------------------------------------------------------

def _forward_results(rng, s, layer=LayerSpec.dense(8, 5)):
    W = rng.standard_normal(layer.weight_shape)
    enc = encode(_batch(rng, s.K, s.M, (layer.in_features,)), s).encoded
    return [linear_forward(layer, W, e) for e in enc]


def test_verify_forward_honest(rng):
    s = gen_scheme(2, 1, 1, seed=1)
    v = verify_forward(_forward_results(rng, s), s)
    assert v.passed and v.max_residual < 1e-12 and v.offending_index is None


def test_verify_forward_detects_perturbation(rng):
    s = gen_scheme(2, 1, 1, seed=2)
    for j in range(4):
        Y = _forward_results(rng, s)
        Y[j] = Y[j] + 1e-2 * np.abs(Y[j]).max() * np.sign(rng.standard_normal(Y[j].shape))
        v = verify_forward(Y, s)
        assert not v.passed and v.offending_index == 3 and v.max_residual >= 1e-6


def test_verify_forward_tolerates_subthreshold(rng):
    tau = 1e-6
    s = gen_scheme(2, 1, 1, seed=3)
    for j in range(4):
        Y = _forward_results(rng, s)
        Y[j] = Y[j] + (tau / 10) * np.abs(Y[j]).max() * 0.1 * np.sign(rng.standard_normal(Y[j].shape))
        assert verify_forward(Y, s, tau).passed


def test_verify_requires_extension(rng):
    s = gen_scheme(2, 1, 0)
    with pytest.raises(IntegrityNotEnabledError):
        verify_forward([np.zeros(2)] * 3, s)
    with pytest.raises(IntegrityNotEnabledError):
        verify_grad([np.zeros(2)] * 6, s)


def _grad_eqs(rng, s, layer=LayerSpec.dense(6, 4)):
    enc = encode(_batch(rng, s.K, s.M, (6,)), s).encoded
    deltas = [rng.standard_normal(4) for _ in range(s.K)]
    return _equations(layer, s, enc, deltas)


def test_verify_grad_honest(rng):
    for seed in range(20):
        s = gen_scheme(2, 1, 1, seed=seed)
        eqs = _grad_eqs(rng, s)
        assert len(eqs) == 2 * s.P
        v = verify_grad(eqs, s)
        assert v.passed and v.max_residual < 1e-12


def test_verify_grad_detects_any_single_corruption(rng):
    for seed in range(30):
        s = gen_scheme(2, 1, 1, seed=seed)
        eqs = _grad_eqs(rng, s)
        j = seed % len(eqs)
        eqs[j] = eqs[j] + 1e-3 * np.abs(eqs[j]).max() * np.sign(rng.standard_normal(eqs[j].shape))
        assert not verify_grad(eqs, s).passed


def test_verify_grad_blind_spot(rng):
    # A corruption spread over the equations along a direction that both
    # decodings weight to zero passes unnoticed.
    s = gen_scheme(2, 1, 1, seed=4)
    eqs = _grad_eqs(rng, s)
    P = s.P
    G = np.zeros((2, 2 * P))
    G[0, :P] = s.gamma
    G[1, P:] = s.gamma_check
    _, _, vt = np.linalg.svd(G)
    null = vt[-1]
    assert np.abs(G @ null).max() < 1e-12
    E = np.abs(eqs[0]).max()
    bad = [e + 1e-1 * E * c * np.ones_like(e) for e, c in zip(eqs, null)]
    v = verify_grad(bad, s)
    assert v.passed
    assert np.abs(decode_grad(bad[:P], s) - decode_grad(eqs[:P], s)).max() < 1e-6 * E


def test_verdict_invariant():
    with pytest.raises(ValueError):
        coding.IntegrityVerdict(True, 1.0, None, 0.5)
    assert coding.IntegrityVerdict(False, 0.5, 3, 0.5).offending_index == 3
