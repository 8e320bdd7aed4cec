import numpy as np
import pytest


def quadratic_losses(m=16, d=5, seed=7, cond=10.0, noise=0.5):
    """Least-squares losses f_i(x) = 0.5 (<a_i, x> - b_i)^2 with a data
    matrix whose Gram spectrum has the requested condition number.

    Returns (loss oracles, d, A, b); the mean loss has the closed-form
    minimizer solving (A^T A) x = A^T b.
    """
    rng = np.random.default_rng(seed)
    U, _, Vt = np.linalg.svd(rng.standard_normal((m, d)), full_matrices=False)
    # nonzero Gram eigenvalues of A^T A / m span [1, cond]
    spectrum = np.sqrt(m) * np.linspace(1.0, np.sqrt(cond), min(m, d))
    A = (U * spectrum) @ Vt
    x_true = 0.5 * rng.standard_normal(d)
    b = A @ x_true + noise * rng.standard_normal(m)

    def make(i):
        def f(x):
            resid = float(A[i] @ x - b[i])
            return 0.5 * resid * resid, resid * A[i]
        return f

    return [make(i) for i in range(m)], d, A, b


@pytest.fixture
def quad16():
    return quadratic_losses(m=16, d=5, seed=7, cond=10.0)
