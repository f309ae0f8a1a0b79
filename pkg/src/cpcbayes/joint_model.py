"""Fully Bayesian joint basis-learning + score-prediction sampler.

Model: each subject matrix G_n is inverse-Wishart with dof nu0 and scale
``Q (B diag(c_n) B^T + eps I)`` (Q = nu0 - P - 1), so its mean is the
low-rank model matrix plus a small ridge; scores are ``y_n ~ N(c_n^T w,
sigma_y^2)`` with y centered internally. Priors: isotropic normal on each
basis column (variance sigma_b_sq), half-normal on the loadings, normal on
w, inverse-gamma on the three variances.

Inference is Metropolis-within-Gibbs: random-walk proposals for B (one
block) and the loadings (per subject, folded at zero to stay nonnegative,
which keeps the proposal symmetric), exact conjugate draws for w and the
variances. Step sizes adapt during burn-in only.

The per-subject inverse-Wishart terms are the hot kernel and run on the
backend selected in ``_backend`` (compiled or numpy); all random draws
happen here, in a fixed order, so chains are reproducible for a given seed
and backend.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import asdict, dataclass, replace

import numpy as np
from scipy.special import gammaln, multigammaln

from . import _backend
from .cohort import Cohort
from .cpc import Dictionary, LoadingMatrix, fit_dictionary
from .errors import ConfigError, NumericalError, ShapeError, ValidationError

GAMMA_JITTERS = (0.0, 1e-10, 1e-8, 1e-6)
ADAPT_INTERVAL = 100
ADAPT_FACTOR = 1.1
ADAPT_TARGET = (0.15, 0.4)


@dataclass(frozen=True)
class JointHyper:
    """Prior and proposal settings; ``nu0``/``sigma_b_sq`` default to the
    cohort-dependent values P+5 and 1/P when left as None."""

    nu0: int | None = None
    a_w: float = 3.0
    b_w: float = 1.0
    a_c: float = 3.0
    b_c: float = 1.0
    a_y: float = 3.0
    b_y: float = 1.0
    sigma_b_sq: float | None = None
    eps_ridge: float = 1e-3
    tau_b: float = 0.01
    tau_c: float = 0.05

    def resolved(self, p: int) -> "JointHyper":
        """Concrete hyperparameters for region count ``p`` (validated)."""
        nu0 = int(self.nu0) if self.nu0 is not None else p + 5
        sigma_b_sq = self.sigma_b_sq if self.sigma_b_sq is not None else 1.0 / p
        if nu0 <= p + 1:
            raise ConfigError(f"need nu0 > P + 1 = {p + 1}, got {nu0}")
        for name in ("a_w", "b_w", "a_c", "b_c", "a_y", "b_y"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"need {name} > 0, got {getattr(self, name)}")
        if sigma_b_sq <= 0 or self.eps_ridge <= 0:
            raise ConfigError("sigma_b_sq and eps_ridge must be positive")
        if self.tau_b <= 0 or self.tau_c <= 0:
            raise ConfigError("random-walk step sizes must be positive")
        return replace(self, nu0=nu0, sigma_b_sq=sigma_b_sq)


@dataclass
class JointState:
    """One sampler state. Sampler-produced states always satisfy c >= 0;
    arbitrary states may violate it, in which case log_posterior is -inf."""

    b: np.ndarray
    c: np.ndarray
    w: np.ndarray
    sigma_w_sq: float
    sigma_c_sq: float
    sigma_y_sq: float

    def __post_init__(self):
        if min(self.sigma_w_sq, self.sigma_c_sq, self.sigma_y_sq) <= 0:
            raise ValidationError("state variances must be positive")


@dataclass(frozen=True)
class GammaInverses:
    """Per-subject inverses of the data matrices plus the cached
    state-independent inverse-Wishart log-likelihood terms."""

    inv: np.ndarray        # (N, P, P)
    logdet: np.ndarray     # (N,) log|G_n| (after any jitter)
    iw_const: np.ndarray   # (N,) state-independent log-density terms
    nu0: int

    @property
    def n(self) -> int:
        return self.inv.shape[0]

    @property
    def p(self) -> int:
        return self.inv.shape[1]


@dataclass
class JointChain:
    """Retained posterior states (stacked arrays) plus run metadata."""

    b_samples: np.ndarray      # (M, P, K)
    c_samples: np.ndarray      # (M, K, N)
    w_samples: np.ndarray      # (M, K)
    sigma_w_sq: np.ndarray     # (M,)
    sigma_c_sq: np.ndarray     # (M,)
    sigma_y_sq: np.ndarray     # (M,)
    accept_rate_b: float
    accept_rate_c: float
    n_burn: int
    seed: int
    y_mean: float
    score_name: str
    hyper: JointHyper
    tau_b_final: float
    tau_c_final: float
    runtime_s: float
    backend: str

    def __len__(self) -> int:
        return self.w_samples.shape[0]

    def __getitem__(self, i: int) -> JointState:
        return JointState(
            b=self.b_samples[i], c=self.c_samples[i], w=self.w_samples[i],
            sigma_w_sq=float(self.sigma_w_sq[i]),
            sigma_c_sq=float(self.sigma_c_sq[i]),
            sigma_y_sq=float(self.sigma_y_sq[i]),
        )

    @property
    def states(self) -> list[JointState]:
        return [self[i] for i in range(len(self))]


@dataclass(frozen=True)
class PredictiveScores:
    samples: np.ndarray  # (M, N)
    mean: np.ndarray     # (N,)
    sd: np.ndarray       # (N,)


def _chol_logdet(x, what: str):
    try:
        chol = np.linalg.cholesky(x)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"{what} is not positive definite") from exc
    return chol, 2.0 * np.log(np.diag(chol)).sum()


def log_iw_density(x, mean_matrix, nu0: int, eps_ridge: float) -> float:
    """Inverse-Wishart log density at ``x`` parameterized by its mean.

    Scale is ``Q (mean_matrix + eps_ridge I)`` with ``Q = nu0 - P - 1``, so
    the distribution's mean equals ``mean_matrix + eps_ridge I``.
    """
    x = np.asarray(x, dtype=float)
    mean_matrix = np.asarray(mean_matrix, dtype=float)
    p = x.shape[0]
    if x.shape != (p, p) or mean_matrix.shape != (p, p):
        raise ShapeError(f"expected matching square matrices, got {x.shape} and {mean_matrix.shape}")
    if nu0 <= p + 1:
        raise ConfigError(f"need nu0 > P + 1 = {p + 1}, got {nu0}")
    q = nu0 - p - 1
    psi = q * (mean_matrix + eps_ridge * np.eye(p))
    chol_x, logdet_x = _chol_logdet(x, "density argument")
    _, logdet_psi = _chol_logdet(psi, "scale matrix")
    # tr(Psi X^-1) via triangular solves against the Cholesky factor of X
    half = np.linalg.solve(chol_x, psi)
    trace = np.trace(np.linalg.solve(chol_x, half.T))
    return float(
        0.5 * nu0 * logdet_psi
        - 0.5 * nu0 * p * np.log(2.0)
        - multigammaln(0.5 * nu0, p)
        - 0.5 * (nu0 + p + 1) * logdet_x
        - 0.5 * trace
    )


def precompute_gamma_inverses(cohort: Cohort, nu0: int, jitters=GAMMA_JITTERS) -> GammaInverses:
    """Invert every subject matrix once (escalating diagonal jitter when a
    Cholesky fails) and cache the state-independent IW log-density terms."""
    p = cohort.p
    if nu0 <= p + 1:
        raise ConfigError(f"need nu0 > P + 1 = {p + 1}, got {nu0}")
    q = nu0 - p - 1
    eye = np.eye(p)
    inv = np.empty((cohort.n, p, p))
    logdet = np.empty(cohort.n)
    for i, subject in enumerate(cohort.subjects):
        for jit in jitters:
            try:
                chol = np.linalg.cholesky(subject.gamma.values + jit * eye)
            except np.linalg.LinAlgError:
                continue
            half = np.linalg.solve(chol, eye)
            inv[i] = half.T @ half
            logdet[i] = 2.0 * np.log(np.diag(chol)).sum()
            break
        else:
            raise NumericalError(
                f"subject {subject.id!r}: matrix not positive definite even with jitter"
            )
    iw_const = (
        0.5 * nu0 * p * np.log(q)
        - 0.5 * nu0 * p * np.log(2.0)
        - multigammaln(0.5 * nu0, p)
        - 0.5 * (nu0 + p + 1) * logdet
    )
    return GammaInverses(inv=inv, logdet=logdet, iw_const=iw_const, nu0=int(nu0))


def _log_ig(x, shape, rate):
    return shape * np.log(rate) - gammaln(shape) - (shape + 1) * np.log(x) - rate / x


def log_posterior(state: JointState, y, hyper: JointHyper, gamma_inverses: GammaInverses) -> float:
    """Full log posterior (unnormalized by the evidence only): IW likelihood
    of every subject matrix, Gaussian score likelihood, and all priors.
    Returns -inf for states outside the support (negative loadings)."""
    y = np.asarray(y, dtype=float)
    p, k = state.b.shape
    n = y.shape[0]
    if state.c.shape != (k, n):
        raise ShapeError(f"loadings shape {state.c.shape} does not match (K={k}, N={n})")
    if gamma_inverses.p != p or gamma_inverses.n != n:
        raise ShapeError("gamma_inverses do not match the state/score dimensions")
    hyper = hyper.resolved(p)
    if gamma_inverses.nu0 != hyper.nu0:
        raise ConfigError(
            f"gamma_inverses were built for nu0={gamma_inverses.nu0}, hyper has nu0={hyper.nu0}"
        )
    if state.c.min() < 0:
        return float("-inf")

    iw = _backend.iw_terms(
        np.ascontiguousarray(state.b), np.ascontiguousarray(state.c),
        gamma_inverses.inv, float(hyper.nu0), hyper.eps_ridge,
    ).sum() + gamma_inverses.iw_const.sum()

    resid = y - state.c.T @ state.w
    loglik_y = -0.5 * n * np.log(2.0 * np.pi * state.sigma_y_sq) \
        - 0.5 * np.dot(resid, resid) / state.sigma_y_sq

    logprior_b = -0.5 * p * k * np.log(2.0 * np.pi * hyper.sigma_b_sq) \
        - 0.5 * np.sum(state.b * state.b) / hyper.sigma_b_sq
    logprior_c = k * n * np.log(2.0) \
        - 0.5 * k * n * np.log(2.0 * np.pi * state.sigma_c_sq) \
        - 0.5 * np.sum(state.c * state.c) / state.sigma_c_sq
    logprior_w = -0.5 * k * np.log(2.0 * np.pi * state.sigma_w_sq) \
        - 0.5 * np.dot(state.w, state.w) / state.sigma_w_sq
    logprior_var = (
        _log_ig(state.sigma_w_sq, hyper.a_w, hyper.b_w)
        + _log_ig(state.sigma_c_sq, hyper.a_c, hyper.b_c)
        + _log_ig(state.sigma_y_sq, hyper.a_y, hyper.b_y)
    )
    return float(iw + loglik_y + logprior_b + logprior_c + logprior_w + logprior_var)


def folded_proposal_density(c_from, c_to, tau: float):
    """Transition density of the reflected random walk ``c' = |c + eps|``.

    Symmetric in (c_from, c_to) on the nonnegative half-line, which is what
    justifies the plain posterior-ratio acceptance probability.
    """
    c_from = np.asarray(c_from, dtype=float)
    c_to = np.asarray(c_to, dtype=float)
    norm = 1.0 / (tau * np.sqrt(2.0 * np.pi))
    dens = norm * (
        np.exp(-0.5 * ((c_to - c_from) / tau) ** 2)
        + np.exp(-0.5 * ((c_to + c_from) / tau) ** 2)
    )
    return np.where(c_to < 0, 0.0, dens)


def sigma_w_conditional(w, hyper: JointHyper):
    """(shape, rate) of the inverse-gamma conditional for the weight variance."""
    w = np.asarray(w, dtype=float)
    return hyper.a_w + 0.5 * w.size, hyper.b_w + 0.5 * np.dot(w, w)


def sigma_c_conditional(c, hyper: JointHyper):
    """(shape, rate) of the inverse-gamma conditional for the loading variance."""
    c = np.asarray(c, dtype=float)
    return hyper.a_c + 0.5 * c.size, hyper.b_c + 0.5 * np.sum(c * c)


def sigma_y_conditional(c, w, y, hyper: JointHyper):
    """(shape, rate) of the inverse-gamma conditional for the score noise."""
    resid = np.asarray(c, float).T @ np.asarray(w, float) - np.asarray(y, float)
    return hyper.a_y + 0.5 * resid.size, hyper.b_y + 0.5 * np.dot(resid, resid)


def w_conditional_params(c, y, sigma_w_sq: float, sigma_y_sq: float):
    """Gaussian conditional for w: mean and covariance."""
    c = np.asarray(c, dtype=float)
    y = np.asarray(y, dtype=float)
    k = c.shape[0]
    prec = np.eye(k) / sigma_w_sq + (c @ c.T) / sigma_y_sq
    cov = np.linalg.inv(prec)
    cov = 0.5 * (cov + cov.T)
    mu = cov @ (c @ y) / sigma_y_sq
    return mu, cov


def _resolve_init(init, cohort, k, seed, rng, sigma_b_sq):
    if init is None:
        b, c, _, _ = fit_dictionary(cohort, k, max_iters=300, tol=1e-6, seed=seed)
        return b.b.copy(), c.c.copy()
    if isinstance(init, str):
        if init != "random":
            raise ConfigError(f"init must be None, 'random', or (basis, loadings); got {init!r}")
        b = rng.standard_normal((cohort.p, k)) * np.sqrt(sigma_b_sq)
        c = np.abs(rng.standard_normal((k, cohort.n)))
        return b, c
    b, c = init
    b = b.b.copy() if isinstance(b, Dictionary) else np.array(b, dtype=float)
    c = c.c.copy() if isinstance(c, LoadingMatrix) else np.array(c, dtype=float)
    if b.shape != (cohort.p, k) or c.shape != (k, cohort.n):
        raise ShapeError(
            f"init shapes {b.shape}, {c.shape} do not match (P={cohort.p}, K={k}, N={cohort.n})"
        )
    if c.min() < 0:
        raise ValidationError("initial loadings must be nonnegative")
    return b, c


def fit_joint(
    cohort: Cohort,
    k: int,
    score_name: str = "y",
    hyper: JointHyper | None = None,
    n_burn: int = 8000,
    n_keep: int = 2000,
    seed: int = 0,
    init=None,
    c_proposal: str = "per-subject",
) -> JointChain:
    """Run the Gibbs-MH sampler and return the retained chain.

    ``init=None`` warm-starts from the alternating-minimization fit (w = 0,
    unit variances); ``init='random'`` cold-starts from the priors; a
    ``(basis, loadings)`` pair is used as given. ``c_proposal`` selects
    per-subject accept/reject for the loadings (default; the conditional
    posterior factorizes over subjects) or ``'joint'`` for one whole-matrix
    decision. Scores are centered internally; predictions are uncentered by
    ``posterior_predictive_scores``.
    """
    t_start = time.perf_counter()
    p = cohort.p
    n = cohort.n
    if not 1 <= k < p:
        raise ConfigError(f"need 1 <= k < P={p}, got k={k}")
    if n_burn < 0 or n_keep < 1:
        raise ConfigError(f"need n_burn >= 0 and n_keep >= 1, got {n_burn}, {n_keep}")
    if c_proposal not in ("per-subject", "joint"):
        raise ConfigError(f"c_proposal must be 'per-subject' or 'joint', got {c_proposal!r}")
    hyper = (hyper or JointHyper()).resolved(p)
    nu0 = float(hyper.nu0)
    eps = hyper.eps_ridge

    y_raw = cohort.scores(score_name)
    y_mean = float(y_raw.mean())
    y = y_raw - y_mean

    ginv = precompute_gamma_inverses(cohort, hyper.nu0)
    rng = np.random.default_rng(seed)
    b, c = _resolve_init(init, cohort, k, seed, rng, hyper.sigma_b_sq)
    b = np.ascontiguousarray(b)
    c = np.ascontiguousarray(c)
    w = np.zeros(k)
    s_w = s_c = s_y = 1.0

    iw_cur = np.asarray(_backend.iw_terms(b, c, ginv.inv, nu0, eps))
    tau_b, tau_c = hyper.tau_b, hyper.tau_c
    eye_k = np.eye(k)

    b_keep = np.empty((n_keep, p, k))
    c_keep = np.empty((n_keep, k, n))
    w_keep = np.empty((n_keep, k))
    var_keep = np.empty((n_keep, 3))

    win_b_acc = win_c_acc = 0.0
    win_iters = 0
    post_b_acc = post_c_acc = 0.0

    total = n_burn + n_keep
    for t in range(total):
        # MH on the basis (one block, symmetric Gaussian proposal)
        b_prop = b + tau_b * rng.standard_normal((p, k))
        u_b = rng.random()
        iw_prop = np.asarray(_backend.iw_terms(np.ascontiguousarray(b_prop), c, ginv.inv, nu0, eps))
        delta_b = (
            iw_prop.sum() - iw_cur.sum()
            + 0.5 * (np.sum(b * b) - np.sum(b_prop * b_prop)) / hyper.sigma_b_sq
        )
        acc_b = np.log(u_b) < delta_b
        if acc_b:
            b = np.ascontiguousarray(b_prop)
            iw_cur = iw_prop

        # MH on the loadings (folded random walk, accepted per subject)
        c_prop = np.ascontiguousarray(np.abs(c + tau_c * rng.standard_normal((k, n))))
        iw_prop = np.asarray(_backend.iw_terms(b, c_prop, ginv.inv, nu0, eps))
        resid_cur = y - c.T @ w
        resid_prop = y - c_prop.T @ w
        delta_n = (
            iw_prop - iw_cur
            + 0.5 * (resid_cur**2 - resid_prop**2) / s_y
            + 0.5 * ((c * c).sum(axis=0) - (c_prop * c_prop).sum(axis=0)) / s_c
        )
        if c_proposal == "per-subject":
            u_c = rng.random(n)
            acc_mask = np.log(u_c) < delta_n
        else:
            u_c = rng.random()
            acc_mask = np.full(n, np.log(u_c) < delta_n.sum())
        if acc_mask.any():
            c[:, acc_mask] = c_prop[:, acc_mask]
            iw_cur[acc_mask] = iw_prop[acc_mask]
        acc_c = acc_mask.mean()

        # exact conjugate draws
        mu_w, cov_w = w_conditional_params(c, y, s_w, s_y)
        w = mu_w + np.linalg.cholesky(cov_w) @ rng.standard_normal(k)

        shape, rate = sigma_w_conditional(w, hyper)
        s_w = 1.0 / rng.gamma(shape, 1.0 / rate)
        shape, rate = sigma_c_conditional(c, hyper)
        s_c = 1.0 / rng.gamma(shape, 1.0 / rate)
        shape, rate = sigma_y_conditional(c, w, y, hyper)
        s_y = 1.0 / rng.gamma(shape, 1.0 / rate)

        if t < n_burn:
            win_b_acc += acc_b
            win_c_acc += acc_c
            win_iters += 1
            if win_iters == ADAPT_INTERVAL:
                rate_b = win_b_acc / win_iters
                rate_c = win_c_acc / win_iters
                if rate_b > ADAPT_TARGET[1]:
                    tau_b *= ADAPT_FACTOR
                elif rate_b < ADAPT_TARGET[0]:
                    tau_b /= ADAPT_FACTOR
                if rate_c > ADAPT_TARGET[1]:
                    tau_c *= ADAPT_FACTOR
                elif rate_c < ADAPT_TARGET[0]:
                    tau_c /= ADAPT_FACTOR
                win_b_acc = win_c_acc = 0.0
                win_iters = 0
        else:
            i = t - n_burn
            b_keep[i] = b
            c_keep[i] = c
            w_keep[i] = w
            var_keep[i] = (s_w, s_c, s_y)
            post_b_acc += acc_b
            post_c_acc += acc_c

    return JointChain(
        b_samples=b_keep,
        c_samples=c_keep,
        w_samples=w_keep,
        sigma_w_sq=var_keep[:, 0].copy(),
        sigma_c_sq=var_keep[:, 1].copy(),
        sigma_y_sq=var_keep[:, 2].copy(),
        accept_rate_b=post_b_acc / n_keep,
        accept_rate_c=post_c_acc / n_keep,
        n_burn=n_burn,
        seed=seed,
        y_mean=y_mean,
        score_name=score_name,
        hyper=hyper,
        tau_b_final=tau_b,
        tau_c_final=tau_c,
        runtime_s=time.perf_counter() - t_start,
        backend=_backend.backend_name(),
    )


def posterior_predictive_scores(chain: JointChain) -> PredictiveScores:
    """Per-subject score samples ``c_n^T w`` across retained states,
    shifted back to the original score scale."""
    samples = np.einsum("mkn,mk->mn", chain.c_samples, chain.w_samples) + chain.y_mean
    return PredictiveScores(samples=samples, mean=samples.mean(axis=0), sd=samples.std(axis=0))


def basis_gramian(state: JointState) -> np.ndarray:
    """B^T B; identity of size K when the basis is exactly orthonormal."""
    return state.b.T @ state.b


def reconstruction_error_map(chain: JointChain, cohort: Cohort) -> np.ndarray:
    """Per-subject elementwise mean of |G_n - B diag(c_n) B^T| over states."""
    gam = cohort.matrices()
    m = len(chain)
    if m == 0:
        raise ConfigError("chain has no retained states")
    acc = np.zeros_like(gam)
    for i in range(m):
        bdc = chain.b_samples[i][None, :, :] * chain.c_samples[i].T[:, None, :]
        acc += np.abs(gam - bdc @ chain.b_samples[i].T)
    return acc / m


def save_joint_run(chain: JointChain, out_dir: str) -> None:
    """Write the run directory: thinned per-state CSVs for w and the
    variances, posterior means of B / C / the basis gramian, and report.json
    with acceptance rates, step sizes, seed, hyper, and runtime."""
    states_dir = os.path.join(out_dir, "states")
    os.makedirs(states_dir, exist_ok=True)
    k = chain.w_samples.shape[1]
    np.savetxt(os.path.join(states_dir, "w.csv"), chain.w_samples, fmt="%.17g",
               delimiter=",", header=",".join(f"w_{i + 1}" for i in range(k)), comments="")
    variances = np.column_stack([chain.sigma_w_sq, chain.sigma_c_sq, chain.sigma_y_sq])
    np.savetxt(os.path.join(states_dir, "variances.csv"), variances, fmt="%.17g",
               delimiter=",", header="sigma_w_sq,sigma_c_sq,sigma_y_sq", comments="")
    np.savetxt(os.path.join(out_dir, "B_mean.csv"), chain.b_samples.mean(axis=0),
               fmt="%.17g", delimiter=",")
    np.savetxt(os.path.join(out_dir, "C_mean.csv"), chain.c_samples.mean(axis=0),
               fmt="%.17g", delimiter=",")
    gramian = np.einsum("mpk,mpl->kl", chain.b_samples, chain.b_samples) / len(chain)
    np.savetxt(os.path.join(out_dir, "gramian_mean.csv"), gramian, fmt="%.17g", delimiter=",")
    report = {
        "accept_rate_b": chain.accept_rate_b,
        "accept_rate_c": chain.accept_rate_c,
        "tau_b_final": chain.tau_b_final,
        "tau_c_final": chain.tau_c_final,
        "n_burn": chain.n_burn,
        "n_keep": len(chain),
        "seed": chain.seed,
        "score_name": chain.score_name,
        "y_mean": chain.y_mean,
        "hyper": asdict(chain.hyper),
        "runtime_s": chain.runtime_s,
        "backend": chain.backend,
    }
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        json.dump(report, fh, indent=2)
