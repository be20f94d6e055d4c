from math import factorial

import numpy as np
import pytest

from conftest import random_hermitian
from detbridge.dynamics import (
    Noise,
    exact_evolve,
    generate_basis,
    krylov_evolve,
    lpe_coefficients,
    parse_scheme,
    richardson_slope,
    scheme_coefficients,
)
from detbridge.oracle import ExactPropagator, infidelity, vector_fidelity
from detbridge.spin_model import Geometry, ModelError, OperatorTerms, SpinConfig, Term, build_tfim
from detbridge.states import basis_state, uniform_state


def chain(n, h=1.0, boundary="open"):
    return build_tfim(Geometry("chain", n, boundary), J=1.0, h=h)


def test_time_zero_returns_input():
    psi = uniform_state(4)
    assert exact_evolve(chain(4), psi, 0.0) is psi


def test_diagonal_hamiltonian_gives_phase():
    H = OperatorTerms(3, [Term(-1.0, "ZZ", (0, 1)), Term(0.4, "Z", (2,))])
    s = SpinConfig.from_string("udd")
    E = H.diagonal_values([s.index])[0]
    out = exact_evolve(H, basis_state(s), 2.3).amplitudes
    assert abs(abs(out[s.index]) - 1) < 1e-14
    assert out[s.index] == pytest.approx(np.exp(-1j * E * 2.3), abs=1e-13)


def test_krylov_matches_dense_spectral():
    H = chain(10)
    psi = uniform_state(10).amplitudes
    dense = ExactPropagator(H).evolve(psi, 5.0)
    kry = krylov_evolve(H, psi, 5.0)
    assert vector_fidelity(dense, kry) > 1 - 1e-10
    assert abs(np.linalg.norm(kry) - 1) < 1e-10


def test_evolution_size_cap():
    with pytest.raises(ModelError):
        exact_evolve(chain(17), uniform_state(17), 1.0)


def test_lpe_order_one():
    assert lpe_coefficients(1) == pytest.approx((1.0,))


def test_lpe_order_two_polynomial_identity():
    a = lpe_coefficients(2)
    assert sorted(a, key=lambda z: z.imag) == pytest.approx([(1 - 1j) / 2, (1 + 1j) / 2], abs=1e-14)
    for x in np.linspace(-3, 3, 13):
        prod = np.prod([1 - 1j * ak * x for ak in a])
        assert prod == pytest.approx(1 - 1j * x - x**2 / 2, abs=1e-13)


@pytest.mark.parametrize("order", [1, 2, 3, 4])
def test_lpe_roots_reproduce_series(order):
    a = lpe_coefficients(order)
    for x in (0.3, 1.1):
        prod = np.prod([1 - 1j * ak * x for ak in a])
        series = sum((-1j * x) ** j / factorial(j) for j in range(order + 1))
        assert abs(prod - series) < 1e-14


@pytest.mark.parametrize(
    "name,order",
    [("taylor1", 1), ("taylor2", 2), ("taylor3", 3), ("taylor4", 4), ("lpe1", 1),
     ("lpe2", 2), ("lpe3", 3), ("lpe4", 4), ("slpe2", 2), ("trotter2", 2)],
)
def test_richardson_slope(name, order):
    scheme = parse_scheme(name)
    H = random_hermitian(6, seed=5)
    H = H / np.linalg.norm(H, 2)
    deltas = np.geomspace(2e-3, 2e-2, 6)
    if order == 4:
        deltas = np.geomspace(2e-2, 1e-1, 6)  # keep errors above rounding
    slope = richardson_slope(scheme, H, deltas)
    assert abs(slope - (order + 1)) < 0.2


def test_unsupported_orders():
    for kind, order in [("lpe", 5), ("taylor", 0), ("slpe", 3)]:
        with pytest.raises(ModelError):
            scheme_coefficients(kind, order)
    with pytest.raises(ModelError):
        parse_scheme("rk4")


def test_exact_scheme_basis_is_exact():
    H = chain(8, boundary="periodic")
    fam, rep = generate_basis(H, uniform_state(8), 0.05, 10, scheme_coefficients("exact"))
    assert fam.m == 11
    assert max(rep.step_infidelity) < 1e-12
    assert max(rep.infidelity) < 1e-12
    np.testing.assert_allclose(np.linalg.norm(fam.matrix, axis=0), 1.0, atol=1e-14)


def test_trotter2_global_error_order():
    H = chain(10, boundary="periodic")
    psi = uniform_state(10)
    scheme = scheme_coefficients("trotter2")
    _, coarse = generate_basis(H, psi, 0.05, 20, scheme)
    _, fine = generate_basis(H, psi, 0.025, 40, scheme)
    ratio = coarse.infidelity[-1] / fine.infidelity[-1]
    assert 12 < ratio < 20


def test_noise_plateau_near_eps_squared():
    H = chain(6)
    eps = 1e-4
    means = []
    for seed in range(10):
        _, rep = generate_basis(
            H, uniform_state(6), 0.05, 8, scheme_coefficients("exact"), Noise(eps), seed=seed
        )
        means.append(np.mean(rep.step_infidelity[1:]))
    assert 0.5 * eps**2 < np.mean(means) < 1.5 * eps**2


def test_generation_is_reproducible():
    H = chain(5)
    args = (H, uniform_state(5), 0.1, 4, parse_scheme("lpe2"), Noise(1e-3))
    f1, _ = generate_basis(*args, seed=7)
    f2, _ = generate_basis(*args, seed=7)
    f3, _ = generate_basis(*args, seed=8)
    assert np.array_equal(f1.matrix, f2.matrix)
    assert not np.array_equal(f1.matrix, f3.matrix)


def test_first_member_is_initial_state():
    fam, _ = generate_basis(chain(4), uniform_state(4), 0.1, 2, parse_scheme("slpe2"))
    assert infidelity(fam.matrix[:, 0], uniform_state(4).amplitudes) == 0.0


def test_noise_validation():
    with pytest.raises(ModelError):
        Noise(-1e-3)
    assert Noise.parse("g:1e-4").eps == 1e-4
    assert Noise.parse("none").descriptor == "none"
    with pytest.raises(ModelError):
        Noise.parse("uniform:3")


def test_generation_rejects_zero_steps():
    with pytest.raises(ModelError):
        generate_basis(chain(3), uniform_state(3), 0.1, 0, parse_scheme("lpe1"))
