"""Shared-basis decomposition of a cohort of correlation matrices.

Each subject matrix is approximated as ``B diag(c_n) B^T`` with one
orthonormal basis B (P x K) shared across the cohort and nonnegative
per-subject loadings c_n. The bi-quadratic objective is split with
auxiliary variables ``D_n = B diag(c_n)`` and multipliers ``L_n``, giving
the augmented objective

    sum_n ||G_n - D_n B^T||_F^2
    + sum_n [ Tr(L_n^T (D_n - B diag(c_n))) + 1/2 ||D_n - B diag(c_n)||_F^2 ]

minimized by cycling three exact updates (loadings, basis, auxiliaries).

Update derivations
------------------
* Loadings: the objective is separable and strictly convex in each c_nk
  (unit quadratic coefficient), so the nonnegative QP solves in closed form,
  ``c_nk = max(0, b_k^T (d_nk + l_nk))``.
* Basis: collecting the B-linear terms under ``B^T B = I`` (the quadratic
  terms reduce to constants by trace cyclicity) leaves
  ``-<B, M>`` with ``M = sum_n [2 G_n D_n + (D_n + L_n) diag(c_n)]``;
  maximizing ``Tr(B^T M)`` is the orthogonal Procrustes problem, solved by
  ``B = U V^T`` from the thin SVD ``M = U S V^T``.
* Auxiliaries: stationarity in D_n gives the K x K linear system
  ``D_n (2 B^T B + I) = 2 G_n B - L_n + B diag(c_n)``, followed by the
  dual ascent ``L_n += D_n - B diag(c_n)`` (unit step, matching the 1/2
  penalty weight).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .cohort import Cohort, CorrelationMatrix
from .errors import ConfigError, DegenerateInput, NumericalError, ShapeError, ValidationError

ORTHO_PRE_TOL = 1e-6       # loosest orthonormality accepted as input
RESIDUAL_CONVERGED = 1e-3  # constraint residual required to declare convergence
DEFAULT_DUAL_STEP = 1.0


@dataclass(frozen=True)
class Dictionary:
    """P x K basis with orthonormal columns (the shared subnetworks)."""

    b: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.b, dtype=float)
        if b.ndim != 2:
            raise ShapeError(f"dictionary must be 2-D, got shape {b.shape}")
        gram_err = np.max(np.abs(b.T @ b - np.eye(b.shape[1])))
        if gram_err > ORTHO_PRE_TOL:
            raise ValidationError(f"dictionary columns not orthonormal (||B^T B - I||_max = {gram_err:.3e})")
        b = b.copy()
        b.setflags(write=False)
        object.__setattr__(self, "b", b)

    @property
    def p(self) -> int:
        return self.b.shape[0]

    @property
    def k(self) -> int:
        return self.b.shape[1]


@dataclass(frozen=True)
class LoadingMatrix:
    """K x N nonnegative per-subject coefficients."""

    c: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.c, dtype=float)
        if c.ndim != 2:
            raise ShapeError(f"loadings must be 2-D, got shape {c.shape}")
        if c.size and c.min() < 0:
            raise ValidationError(f"loadings must be nonnegative (min = {c.min():.3e})")
        c = c.copy()
        c.setflags(write=False)
        object.__setattr__(self, "c", c)

    @property
    def k(self) -> int:
        return self.c.shape[0]

    @property
    def n(self) -> int:
        return self.c.shape[1]


@dataclass(frozen=True)
class AugmentedState:
    """Splitting variables: D (N,P,K) and multipliers L (N,P,K)."""

    d: np.ndarray
    lam: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.d, dtype=float)
        lam = np.asarray(self.lam, dtype=float)
        if d.ndim != 3 or lam.shape != d.shape:
            raise ShapeError(f"auxiliary arrays must share shape (N,P,K), got {d.shape} and {lam.shape}")
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "lam", lam)


@dataclass
class CpcFitReport:
    objective_trace: list[float]
    constraint_residual_trace: list[float]
    iterations: int
    converged: bool


def _gamma_stack(gammas) -> np.ndarray:
    """Accept a Cohort, a list of CorrelationMatrix, or an (N,P,P) array."""
    if isinstance(gammas, Cohort):
        return gammas.matrices()
    if isinstance(gammas, np.ndarray):
        stack = gammas
    else:
        stack = np.stack([g.values if isinstance(g, CorrelationMatrix) else np.asarray(g, float)
                          for g in gammas])
    if stack.ndim != 3 or stack.shape[1] != stack.shape[2]:
        raise ShapeError(f"expected stack of square matrices, got shape {stack.shape}")
    return stack


def _basis_array(b) -> np.ndarray:
    return b.b if isinstance(b, Dictionary) else np.asarray(b, dtype=float)


def _loading_array(c) -> np.ndarray:
    return c.c if isinstance(c, LoadingMatrix) else np.asarray(c, dtype=float)


def _check_orthonormal(b: np.ndarray, tol: float = ORTHO_PRE_TOL):
    err = np.max(np.abs(b.T @ b - np.eye(b.shape[1])))
    if err > tol:
        raise ValidationError(f"basis columns not orthonormal within {tol:g} (error {err:.3e})")


def _b_diag_c(b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Stack of B diag(c_n), shape (N, P, K)."""
    return b[None, :, :] * c.T[:, None, :]


def objective(gammas, b, c, state: AugmentedState) -> float:
    """Value of the augmented splitting objective at (B, C, D, L)."""
    gam = _gamma_stack(gammas)
    b = _basis_array(b)
    c = _loading_array(c)
    fit = gam - state.d @ b.T
    gap = state.d - _b_diag_c(b, c)
    return float(np.sum(fit * fit) + np.sum(state.lam * gap) + 0.5 * np.sum(gap * gap))


def constraint_residual(b, c, state: AugmentedState) -> float:
    """max_n ||D_n - B diag(c_n)||_F, the splitting-constraint violation."""
    gap = state.d - _b_diag_c(_basis_array(b), _loading_array(c))
    return float(np.sqrt((gap * gap).sum(axis=(1, 2))).max())


def update_loadings(gammas, b, state: AugmentedState) -> LoadingMatrix:
    """Exact nonnegative minimizer of the objective in C.

    Separable per (n, k): ``c_nk = max(0, b_k^T (d_nk + l_nk))``.
    """
    b = _basis_array(b)
    _check_orthonormal(b)
    dpl = state.d + state.lam
    if dpl.shape[1:] != b.shape:
        raise ShapeError(f"auxiliary shape {dpl.shape[1:]} does not match basis {b.shape}")
    c = np.einsum("pk,npk->kn", b, dpl)
    return LoadingMatrix(np.maximum(c, 0.0))


def update_dictionary(gammas, c, state: AugmentedState) -> Dictionary:
    """Procrustes solution for B: thin SVD of the collected linear target.

    ``M = sum_n [2 G_n D_n + (D_n + L_n) diag(c_n)]``, ``B = U V^T``.
    Singular-vector signs are canonicalized (largest-magnitude entry of each
    left vector forced positive, with the matching right vector flipped) so
    degenerate spectra still give reproducible output.
    """
    gam = _gamma_stack(gammas)
    c = _loading_array(c)
    if gam.shape[0] != state.d.shape[0] or gam.shape[1] != state.d.shape[1]:
        raise ShapeError(f"matrix stack {gam.shape} does not match auxiliaries {state.d.shape}")
    m = 2.0 * np.einsum("npq,nqk->pk", gam, state.d)
    m += np.einsum("npk,kn->pk", state.d + state.lam, c)
    if not np.any(m):
        raise DegenerateInput("all-zero Procrustes target: basis is not identifiable")
    try:
        u, _, vt = np.linalg.svd(m, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"SVD of Procrustes target failed: {exc}") from exc
    signs = np.sign(u[np.argmax(np.abs(u), axis=0), np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    u = u * signs
    vt = vt * signs[:, None]
    return Dictionary(u @ vt)


def update_auxiliary(gammas, b, c, state: AugmentedState) -> AugmentedState:
    """Exact D-block minimizer followed by the unit dual ascent on L."""
    gam = _gamma_stack(gammas)
    b = _basis_array(b)
    c = _loading_array(c)
    n, p, _ = gam.shape
    if b.shape[0] != p or c.shape != (b.shape[1], n):
        raise ShapeError(
            f"shapes inconsistent: gammas {gam.shape}, basis {b.shape}, loadings {c.shape}"
        )
    bdc = _b_diag_c(b, c)
    rhs = 2.0 * np.einsum("npq,qk->npk", gam, b) - state.lam + bdc
    system = 2.0 * b.T @ b + np.eye(b.shape[1])
    try:
        d_new = np.linalg.solve(system, rhs.reshape(n * p, -1).T).T.reshape(n, p, -1)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"auxiliary system solve failed: {exc}") from exc
    lam_new = state.lam + DEFAULT_DUAL_STEP * (d_new - bdc)
    return AugmentedState(d=d_new, lam=lam_new)


def project_loadings(gamma_new, b) -> np.ndarray:
    """Loadings for an unseen matrix under a fixed orthonormal basis.

    ``c_k = max(0, b_k^T G b_k)`` minimizes ``||G - sum_k c_k b_k b_k^T||_F^2``
    over ``c >= 0``; used to embed held-out subjects during cross-validation.
    """
    g = gamma_new.values if isinstance(gamma_new, CorrelationMatrix) else np.asarray(gamma_new, float)
    b = _basis_array(b)
    _check_orthonormal(b)
    if g.shape != (b.shape[0], b.shape[0]):
        raise ShapeError(f"matrix shape {g.shape} does not match basis rows {b.shape[0]}")
    return np.maximum(np.einsum("pk,pq,qk->k", b, g, b), 0.0)


def reconstruct(b, c_n) -> np.ndarray:
    """Model matrix ``B diag(c_n) B^T`` (symmetric PSD for c_n >= 0)."""
    b = _basis_array(b)
    c_n = np.asarray(c_n, dtype=float)
    if c_n.ndim != 1 or c_n.shape[0] != b.shape[1]:
        raise ShapeError(f"loading vector length {c_n.shape} does not match basis columns {b.shape[1]}")
    if c_n.size and c_n.min() < 0:
        raise ValidationError(f"loadings must be nonnegative (min = {c_n.min():.3e})")
    out = (b * c_n) @ b.T
    return 0.5 * (out + out.T)


def initial_basis(gammas, k: int) -> Dictionary:
    """Top-K eigenvectors of the cohort mean matrix (descending eigenvalues)."""
    gam = _gamma_stack(gammas)
    p = gam.shape[1]
    if not 1 <= k < p:
        raise ConfigError(f"need 1 <= k < P={p}, got k={k}")
    try:
        eigvals, eigvecs = np.linalg.eigh(gam.mean(axis=0))
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"eigendecomposition of mean matrix failed: {exc}") from exc
    order = np.argsort(eigvals)[::-1][:k]
    b0 = eigvecs[:, order]
    # canonical signs, as for SVD output
    signs = np.sign(b0[np.argmax(np.abs(b0), axis=0), np.arange(k)])
    signs[signs == 0] = 1.0
    return Dictionary(b0 * signs)


def fit_dictionary(
    cohort,
    k: int,
    max_iters: int = 1000,
    tol: float = 1e-6,
    seed: int = 0,
) -> tuple[Dictionary, LoadingMatrix, AugmentedState, CpcFitReport]:
    """Alternating minimization until the relative objective change drops
    below ``tol`` and the splitting residual below 1e-3 (or ``max_iters``).

    Initialization: B from the top eigenvectors of the mean matrix, loadings
    by projection, ``D_n = B diag(c_n)``, ``L_n = 0``. Updates cycle
    loadings -> basis -> auxiliaries, always consuming the freshest values.
    The fit is deterministic; ``seed`` is recorded for provenance only.
    """
    if max_iters < 1:
        raise ConfigError(f"need max_iters >= 1, got {max_iters}")
    if tol <= 0:
        raise ConfigError(f"need tol > 0, got {tol}")
    gam = _gamma_stack(gammas=cohort)
    n = gam.shape[0]

    b = initial_basis(gam, k)
    c0 = np.stack([project_loadings(gam[i], b) for i in range(n)], axis=1)
    c = LoadingMatrix(c0)
    state = AugmentedState(d=_b_diag_c(b.b, c.c), lam=np.zeros((n, gam.shape[1], k)))

    objective_trace: list[float] = []
    residual_trace: list[float] = []
    converged = False
    prev = None
    for _ in range(max_iters):
        c = update_loadings(gam, b, state)
        b = update_dictionary(gam, c, state)
        state = update_auxiliary(gam, b, c, state)
        obj = objective(gam, b, c, state)
        residual = constraint_residual(b, c, state)
        objective_trace.append(obj)
        residual_trace.append(residual)
        if prev is not None:
            rel_change = abs(prev - obj) / max(1.0, abs(prev))
            if rel_change < tol and residual < RESIDUAL_CONVERGED:
                converged = True
        prev = obj
        if converged:
            break

    report = CpcFitReport(
        objective_trace=objective_trace,
        constraint_residual_trace=residual_trace,
        iterations=len(objective_trace),
        converged=converged,
    )
    return b, c, state, report


def save_fit(out_dir: str, b: Dictionary, c: LoadingMatrix, report: CpcFitReport,
             seed: int, k: int, tol: float) -> None:
    """Serialize a fitted model: B.csv (P x K), C.csv (K x N), report.json."""
    os.makedirs(out_dir, exist_ok=True)
    np.savetxt(os.path.join(out_dir, "B.csv"), _basis_array(b), fmt="%.17g", delimiter=",")
    np.savetxt(os.path.join(out_dir, "C.csv"), _loading_array(c), fmt="%.17g", delimiter=",")
    payload = {
        "objective_trace": report.objective_trace,
        "constraint_residual_trace": report.constraint_residual_trace,
        "iterations": report.iterations,
        "converged": report.converged,
        "seed": seed,
        "k": k,
        "tol": tol,
    }
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        json.dump(payload, fh, indent=2)


def load_fit(fit_dir: str) -> tuple[Dictionary, LoadingMatrix]:
    """Load B.csv / C.csv written by save_fit."""
    b = np.loadtxt(os.path.join(fit_dir, "B.csv"), delimiter=",", ndmin=2)
    c = np.loadtxt(os.path.join(fit_dir, "C.csv"), delimiter=",", ndmin=2)
    return Dictionary(b), LoadingMatrix(c)
