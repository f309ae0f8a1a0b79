"""Pure-numpy backend for the joint sampler's hot kernel.

Same contract as the compiled backend in ``_iw_cython``: per-subject
state-dependent part of the inverse-Wishart log likelihood,

    s_n = nu0/2 * log|A_n| - Q/2 * <A_n, Ginv_n>,
    A_n = B diag(c_n) B^T + eps I,   Q = nu0 - P - 1.

All remaining likelihood terms depend only on the data matrices and are
cached by the caller. Requires ``c >= 0`` and ``eps > 0`` so A_n is PD.
"""

import numpy as np


def iw_terms(b, c, gamma_inv, nu0, eps):
    """Vector of s_n, shape (N,). Batched over subjects."""
    p = b.shape[0]
    q = nu0 - p - 1
    a = (b[None, :, :] * c.T[:, None, :]) @ b.T
    a[:, np.arange(p), np.arange(p)] += eps
    chol = np.linalg.cholesky(a)
    logdet = 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)
    inner = np.einsum("npq,npq->n", a, gamma_inv)
    return 0.5 * nu0 * logdet - 0.5 * q * inner
