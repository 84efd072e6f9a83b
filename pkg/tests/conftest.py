import numpy as np
import pytest

from gatesynth.basis import build_basis, structure_constants


@pytest.fixture(scope="session")
def basis_2():
    return build_basis(2)


@pytest.fixture(scope="session")
def basis_4():
    return build_basis(4)


@pytest.fixture(scope="session")
def basis_8():
    return build_basis(8)


@pytest.fixture(scope="session")
def sc_2(basis_2):
    # cache=False keeps tests independent of any on-disk cache state
    return structure_constants(basis_2, cache=False)


@pytest.fixture(scope="session")
def sc_4(basis_4):
    return structure_constants(basis_4, cache=False)


@pytest.fixture(scope="session")
def sc_8(basis_8):
    return structure_constants(basis_8, cache=False)


@pytest.fixture()
def rng():
    return np.random.default_rng(20240817)


def random_operator(rng, d):
    return rng.standard_normal((d, d)) + 1j * rng.standard_normal((d, d))


def random_hermitian(rng, d):
    X = random_operator(rng, d)
    return (X + X.conj().T) / 2


def random_unitary(rng, d):
    Q, R = np.linalg.qr(random_operator(rng, d))
    return Q * (np.diag(R) / np.abs(np.diag(R)))
