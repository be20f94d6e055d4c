import numpy as np
import pytest
import scipy.sparse.linalg as spla

from conftest import random_family
from detbridge.oracle import (
    ExactPropagator,
    diagonalize,
    fidelity,
    ground_state,
    infidelity,
)
from detbridge.rayleigh import exact_gram_pack
from detbridge.spin_model import Geometry, ModelError, OperatorTerms, SpinConfig, Term, build_tfim
from detbridge.states import AmplitudeState, basis_state, uniform_state
from detbridge.subspace import ritz_spectrum


def test_single_spin_flip():
    H = OperatorTerms(1, [Term(-1.0, "X", (0,))])
    np.testing.assert_allclose(diagonalize(H).eigenvalues, [-1.0, 1.0], atol=1e-14)


def test_classical_ising_pair():
    H = build_tfim(Geometry("chain", 2), J=1.0, h=0.0)
    np.testing.assert_allclose(np.diag(H.to_dense()).real, [-1, 1, 1, -1])
    np.testing.assert_allclose(diagonalize(H).eigenvalues, [-1, -1, 1, 1], atol=1e-14)


def test_residuals_and_ordering():
    H = build_tfim(Geometry("chain", 6, "periodic"), J=1.0, h=0.7)
    spec = diagonalize(H)
    assert np.all(np.diff(spec.eigenvalues) >= 0)
    norm = np.linalg.norm(H.to_dense(), 2)
    assert np.max(spec.residuals(H)) <= 1e-10 * norm


def test_size_cap():
    with pytest.raises(ModelError):
        diagonalize(build_tfim(Geometry("chain", 13), 1.0, 1.0))


def test_ground_energy_matches_independent_lanczos():
    H = build_tfim(Geometry("chain", 12), J=1.0, h=1.0)
    e_dense = diagonalize(H, n_lowest=1).eigenvalues[0]
    w = spla.eigsh(H.to_sparse(), k=1, which="SA", tol=1e-12, return_eigenvectors=False)
    assert abs(e_dense - w[0]) < 1e-9
    e_gs, psi = ground_state(H)
    assert abs(e_gs - e_dense) < 1e-9
    assert np.linalg.norm(H.apply(psi.amplitudes) - e_gs * psi.amplitudes) < 1e-6


def test_fidelity_examples():
    rng = np.random.default_rng(3)
    a = AmplitudeState(3, rng.normal(size=8) + 1j * rng.normal(size=8))
    b = AmplitudeState(3, 3j * a.amplitudes)
    assert fidelity(a, b) == pytest.approx(1.0, abs=1e-15)
    up_up = basis_state(SpinConfig.from_string("uu"))
    down_up = basis_state(SpinConfig.from_string("du"))
    assert fidelity(up_up, down_up) == 0.0
    assert fidelity(uniform_state(2), up_up) == pytest.approx(0.25, abs=1e-15)


def test_fidelity_errors():
    with pytest.raises(ModelError):
        fidelity(uniform_state(2), uniform_state(3))
    with pytest.raises(ModelError):
        fidelity(uniform_state(2), AmplitudeState(2, np.zeros(4)))


def test_infidelity_resolves_tiny_values():
    a = np.array([1.0, 0.0], dtype=complex)
    b = np.array([1.0, 1e-12], dtype=complex)
    assert infidelity(a, b) == pytest.approx(1e-24, rel=1e-6)


def test_propagator_preserves_norm():
    H = build_tfim(Geometry("chain", 5), 1.0, 0.9)
    psi = uniform_state(5).amplitudes
    out = ExactPropagator(H).states_at(psi, [0.0, 1.0, 7.5])
    np.testing.assert_allclose(np.linalg.norm(out, axis=0), 1.0, atol=1e-12)
    np.testing.assert_allclose(out[:, 0], psi, atol=1e-14)


def test_min_max_full_space_equality():
    H = build_tfim(Geometry("chain", 4, "periodic"), 1.0, 0.8)
    fam = random_family(4, 16, seed=11)
    ritz = ritz_spectrum(exact_gram_pack(fam, [H]))
    np.testing.assert_allclose(ritz.values, diagonalize(H).eigenvalues, atol=1e-9)


def test_min_max_interlacing_bound():
    H = build_tfim(Geometry("chain", 5), 1.0, 1.1)
    exact = diagonalize(H).eigenvalues
    for seed in range(5):
        ritz = ritz_spectrum(exact_gram_pack(random_family(5, 6, seed=seed), [H]))
        assert np.all(ritz.values >= exact[:6] - 1e-10)
