import math

import numpy as np
import pytest

from conftest import random_family, random_hermitian
from detbridge.det_state import DetSamplerConfig
from detbridge.oracle import diagonalize, ground_state
from detbridge.rayleigh import GramPack, estimate_sum_of_states, exact_gram_pack, exact_rayleigh
from detbridge.spin_model import Geometry, ModelError, OperatorTerms, Term, build_tfim, magnetization_x
from detbridge.states import BasisFamily
from detbridge.subspace import (
    DegenerateRitzError,
    GroundStateInterpolator,
    direct_ratio,
    interpolate_ground_state,
    ritz_observable,
    ritz_spectrum,
    state_distance_mc,
    subspace_distance_exact,
    subspace_distance_mc,
)


def tfim(n, h=1.2):
    return build_tfim(Geometry("chain", n, "periodic"), J=1.0, h=h)


def dense_pack(F, H):
    return GramPack(F.conj().T @ F, {"H": F.conj().T @ H @ F}, True, "exact")


def projector_distance(U, V):
    """Distance from the projector onto span V applied to an orthonormal basis of U."""
    QU, _ = np.linalg.qr(U.matrix)
    QV, _ = np.linalg.qr(V.matrix)
    PV = QV @ QV.conj().T
    proj = PV @ QU
    f = np.linalg.det(proj.conj().T @ proj).real
    return math.acos(math.sqrt(min(1.0, max(0.0, f))))


# --------------------------------------------------------------------------
# distances

def test_same_span_is_zero_distance():
    U = random_family(5, 3, seed=1)
    rng = np.random.default_rng(2)
    B = rng.normal(size=(3, 3)) + 1j * rng.normal(size=(3, 3))
    V = BasisFamily.from_matrix(U.matrix @ B)
    assert subspace_distance_exact(U, V) < 1e-7


def test_orthogonal_member_gives_max_distance():
    eye = np.eye(8, dtype=complex)
    U = BasisFamily.from_matrix(eye[:, [0, 1]])
    V = BasisFamily.from_matrix(eye[:, [0, 2]] + 0.5 * eye[:, [1, 3]] * np.array([1, 0]))
    assert subspace_distance_exact(U, V) == pytest.approx(math.pi / 2, abs=1e-12)


def test_matches_projector_oracle():
    for seed in range(10):
        U = random_family(3, 2, seed=seed)
        V = random_family(3, 2, seed=100 + seed)
        assert subspace_distance_exact(U, V) == pytest.approx(projector_distance(U, V), abs=1e-10)


def test_metric_properties():
    for seed in range(10):
        A, B, C = (random_family(4, 2, seed=3 * seed + k) for k in range(3))
        dab, dba = subspace_distance_exact(A, B), subspace_distance_exact(B, A)
        assert abs(dab - dba) < 1e-9
        assert subspace_distance_exact(A, C) <= dab + subspace_distance_exact(B, C) + 1e-9


def test_small_distance_means_equal_projectors():
    U = random_family(5, 2, seed=7)
    V = BasisFamily.from_matrix(U.matrix @ np.array([[1.0, 2.0], [0.5, -1.0]]))
    assert subspace_distance_exact(U, V) < 1e-7
    QU, _ = np.linalg.qr(U.matrix)
    QV, _ = np.linalg.qr(V.matrix)
    assert np.max(np.abs(QU @ QU.conj().T - QV @ QV.conj().T)) < 1e-6


def test_distance_errors():
    with pytest.raises(ModelError):
        subspace_distance_exact(random_family(4, 2), random_family(4, 3))
    F = random_family(4, 1).matrix
    with pytest.raises(ModelError):
        subspace_distance_exact(BasisFamily.from_matrix(np.column_stack([F, 2 * F])), random_family(4, 2))


def test_mc_distance_of_identical_subspaces():
    U = random_family(4, 2, seed=3)
    est = subspace_distance_mc(U, U, DetSamplerConfig(n_chains=4, n_samples_per_chain=200, seed=5))
    assert est.distance <= 3 * est.error + 1e-12


def test_mc_single_member_reduces_to_state_estimator():
    U, V = random_family(5, 1, seed=1), random_family(5, 1, seed=2)
    cfg = DetSamplerConfig(n_chains=4, n_samples_per_chain=500, seed=11)
    a = subspace_distance_mc(U, V, cfg)
    b = state_distance_mc(U[0], V[0], cfg)
    assert a.distance == pytest.approx(b.distance, abs=1e-12)
    assert a.error == pytest.approx(b.error, abs=1e-12)


def test_mc_distance_agrees_with_exact():
    hits = 0
    for seed in range(20):
        U = random_family(4, 2, seed=seed)
        V = random_family(4, 2, seed=50 + seed)
        est = subspace_distance_mc(U, V, DetSamplerConfig(n_chains=8, n_samples_per_chain=2000, seed=seed))
        hits += abs(est.distance - subspace_distance_exact(U, V)) < 5 * est.error
    assert hits == 20


def test_control_variates_flag_is_off():
    U = random_family(3, 1)
    with pytest.raises(NotImplementedError):
        subspace_distance_mc(U, U, DetSamplerConfig(), control_variates=True)


# --------------------------------------------------------------------------
# Ritz spectrum

def test_single_member_is_rayleigh_quotient():
    H = random_hermitian(8, seed=1)
    v = np.random.default_rng(0).normal(size=(8, 1)) + 0j
    ritz = ritz_spectrum(dense_pack(v, H))
    assert ritz.values[0] == pytest.approx((v.conj().T @ H @ v).real.item() / np.vdot(v, v).real)


def test_eigenvector_family_gives_eigenvalues():
    H = tfim(6)
    spec = diagonalize(H)
    fam = BasisFamily.from_matrix(spec.eigenvectors[:, :3] @ np.array([[1, 2, 0], [0, 1, 1], [1, 0, 3]]))
    ritz = ritz_spectrum(exact_gram_pack(fam, [H]))
    np.testing.assert_allclose(ritz.values, spec.eigenvalues[:3], atol=1e-10)


def test_ritz_values_bound_eigenvalues():
    rng = np.random.default_rng(42)
    for trial in range(200):
        H = random_hermitian(8, seed=trial)
        E = np.linalg.eigvalsh(H)
        F = rng.normal(size=(8, 3)) + 1j * rng.normal(size=(8, 3))
        mu = ritz_spectrum(dense_pack(F, H)).values
        assert np.all(mu - E[:3] >= -1e-10)


def test_ritz_invariants():
    H = tfim(6)
    fam = random_family(6, 4, seed=9)
    pack = exact_gram_pack(fam, [H])
    ritz = ritz_spectrum(pack)
    assert np.all(np.diff(ritz.values) >= 0)
    G, GH = pack.G, pack.op("H")
    for k in range(4):
        a = ritz.vectors[:, k]
        assert np.linalg.norm(GH @ a - ritz.values[k] * G @ a) < 1e-8 * np.linalg.norm(GH)
        psi = ritz.state(fam, k)
        rq = np.vdot(psi, H.apply(psi)).real / np.vdot(psi, psi).real
        assert rq == pytest.approx(ritz.values[k], abs=1e-9)
    assert np.sum(ritz.values) == pytest.approx(np.trace(exact_rayleigh(fam, H, "direct").M).real, abs=1e-10)


def test_ritz_basis_invariance():
    H = tfim(6)
    fam = random_family(6, 3, seed=10)
    rng = np.random.default_rng(1)
    B = np.eye(3) + 0.4 * rng.normal(size=(3, 3))
    mu = ritz_spectrum(exact_gram_pack(fam, [H])).values
    muB = ritz_spectrum(exact_gram_pack(BasisFamily.from_matrix(fam.matrix @ B), [H])).values
    np.testing.assert_allclose(mu, muB, atol=1e-9)


def test_ritz_from_estimate_and_unscaled_pack():
    H = tfim(5)
    fam = random_family(5, 3, seed=2)
    mu = ritz_spectrum(exact_gram_pack(fam, [H])).values
    np.testing.assert_allclose(ritz_spectrum(exact_rayleigh(fam, H, "direct")).values, mu, atol=1e-10)
    sos = estimate_sum_of_states(fam, [H], exhaustive=True)
    np.testing.assert_allclose(ritz_spectrum(sos).values, mu, atol=1e-10)


def test_singular_gram_raises():
    F = random_family(4, 1).matrix
    pack = exact_gram_pack(BasisFamily.from_matrix(np.column_stack([F, F])), [tfim(4)])
    with pytest.raises(ModelError):
        ritz_spectrum(pack)


# --------------------------------------------------------------------------
# observables on Ritz vectors

def test_observable_consistency():
    H = tfim(6)
    fam = random_family(6, 3, seed=4)
    pack = exact_gram_pack(fam, [H, magnetization_x(6)])
    mu = ritz_spectrum(pack).values
    np.testing.assert_allclose(ritz_observable(pack, a_label="H"), mu, atol=1e-10)
    np.testing.assert_allclose(ritz_observable(pack, a_label="I"), 1.0, atol=1e-12)


def test_observable_matches_reconstructed_vectors():
    H = tfim(6)
    Mx = magnetization_x(6)
    fam = random_family(6, 3, seed=5)
    pack = exact_gram_pack(fam, [H, Mx])
    ritz = ritz_spectrum(pack)
    got = ritz_observable(pack, a_label="Mx")
    for k in range(3):
        psi = ritz.state(fam, k)
        want = np.vdot(psi, Mx.apply(psi)).real / np.vdot(psi, psi).real
        assert got[k] == pytest.approx(want, abs=1e-9)
        assert direct_ratio(pack, ritz.vectors[:, k], "Mx") == pytest.approx(want, abs=1e-9)


def test_degenerate_ritz_values_are_refused():
    H = OperatorTerms(3, [Term(1.0, "I")], "H")
    pack = exact_gram_pack(random_family(3, 2, seed=0), [H, magnetization_x(3)])
    with pytest.raises(DegenerateRitzError, match="direct ratio"):
        ritz_observable(pack, a_label="Mx")


# --------------------------------------------------------------------------
# ground-state interpolation

def parts(n):
    geo = Geometry("chain", n)
    H0 = build_tfim(geo, 1.0, 0.0)
    H1 = OperatorTerms(n, [Term(-1.0, "X", (i,)) for i in range(n)], "H1")
    return OperatorTerms(n, H0.terms, "H0"), H1


def test_query_at_anchor_recovers_ground_state():
    H0, H1 = parts(6)
    hs = [0.5, 1.0, 1.5]
    states = [ground_state(build_tfim(Geometry("chain", 6), 1.0, h))[1].amplitudes for h in hs]
    fam = BasisFamily.from_matrix(np.column_stack(states))
    pack = exact_gram_pack(fam, [H0, H1])
    res = interpolate_ground_state(fam, pack, ["H0", "H1"], [[1.0, h] for h in hs], states)
    assert max(r.infidelity for r in res) < 1e-10


def test_endpoint_matches_part_spectrum():
    H0, H1 = parts(5)
    fam = random_family(5, 3, seed=3)
    pack = exact_gram_pack(fam, [H0, H1])
    res = GroundStateInterpolator(pack, ["H0", "H1"]).query([1.0, 0.0])
    assert res.mu0 == pytest.approx(ritz_spectrum(pack, "H0").values[0], abs=1e-12)


def test_mixed_scale_packs_rejected():
    H0, H1 = parts(4)
    fam = random_family(4, 2, seed=1)
    exact = exact_gram_pack(fam, [H0])
    sos = estimate_sum_of_states(fam, [H1], exhaustive=True)
    with pytest.raises(ModelError):
        GroundStateInterpolator([exact, sos], ["H0", "H1"])


def test_gamma_length_checked():
    H0, H1 = parts(4)
    interp = GroundStateInterpolator(exact_gram_pack(random_family(4, 2), [H0, H1]), ["H0", "H1"])
    with pytest.raises(ModelError):
        interp.query([1.0])
