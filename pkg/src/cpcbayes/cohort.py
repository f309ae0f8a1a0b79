"""Cohort data model: validated correlation matrices with scalar scores.

A cohort is an ordered list of subjects, each carrying a P x P correlation
matrix and a dict of named scalar scores. Cohorts are immutable after
construction and safe to share across workers. File layout is a manifest CSV
(``subject_id,matrix_path,<score1>,...``) whose matrix paths point to
headerless P x P CSV files, resolved relative to the manifest's directory.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, IoError, ShapeError, ValidationError

SYMMETRY_TOL = 1e-12
PSD_TOL = 1e-8
ENTRY_TOL = 1e-9
DIAG_TOL = 1e-9

# keeps synthetic model matrices strictly PD (the joint model inverts them)
SYNTHETIC_RIDGE = 0.1

_CSV_FMT = "%.17g"  # round-trips float64 exactly


@dataclass(frozen=True)
class CorrelationMatrix:
    """Symmetric PSD matrix with unit diagonal (correlation convention).

    ``strict_diagonal=False`` relaxes the unit-diagonal and [-1, 1] entry
    checks so arbitrary symmetric PSD matrices (e.g. raw Wishart draws) can
    be wrapped; symmetry and PSD-ness are always enforced.
    """

    values: np.ndarray
    strict_diagonal: bool = True

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ShapeError(f"correlation matrix must be square, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValidationError("correlation matrix has non-finite entries")
        asym = np.max(np.abs(v - v.T)) if v.size else 0.0
        if asym > SYMMETRY_TOL:
            raise ValidationError(f"matrix not symmetric (max |a_ij - a_ji| = {asym:.3e})")
        eigvals = np.linalg.eigvalsh(v)
        lo, hi = eigvals[0], eigvals[-1]
        if lo < -PSD_TOL * max(hi, 0.0):
            raise ValidationError(f"matrix not PSD (min eigenvalue {lo:.3e}, max {hi:.3e})")
        if self.strict_diagonal:
            if np.max(np.abs(np.diag(v) - 1.0)) > DIAG_TOL:
                raise ValidationError("diagonal entries must equal 1 for a correlation matrix")
            if np.max(np.abs(v)) > 1.0 + ENTRY_TOL:
                raise ValidationError("correlation entries must lie in [-1, 1]")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def p(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class Subject:
    """One cohort member: id, correlation matrix, named scalar scores."""

    id: str
    gamma: CorrelationMatrix
    scores: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.id:
            raise ValidationError("subject id must be nonempty")
        for name, value in self.scores.items():
            if not np.isfinite(value):
                raise ValidationError(f"subject {self.id!r}: score {name!r} is not finite")


@dataclass(frozen=True)
class Cohort:
    """Ordered subjects sharing one region count P."""

    subjects: tuple[Subject, ...]

    def __post_init__(self):
        subjects = tuple(self.subjects)
        if not subjects:
            raise ValidationError("cohort must contain at least one subject")
        p0 = subjects[0].gamma.p
        for s in subjects:
            if s.gamma.p != p0:
                raise ShapeError(
                    f"subject {s.id!r} has p={s.gamma.p}, expected p={p0} shared by the cohort"
                )
        ids = [s.id for s in subjects]
        if len(set(ids)) != len(ids):
            raise ValidationError("subject ids must be unique within a cohort")
        object.__setattr__(self, "subjects", subjects)

    @property
    def n(self) -> int:
        return len(self.subjects)

    @property
    def p(self) -> int:
        return self.subjects[0].gamma.p

    def matrices(self) -> np.ndarray:
        """Stack of the N correlation matrices, shape (N, P, P)."""
        return np.stack([s.gamma.values for s in self.subjects])

    def scores(self, name: str) -> np.ndarray:
        """Score vector across subjects; raises if any subject lacks it."""
        try:
            return np.array([s.scores[name] for s in self.subjects], dtype=float)
        except KeyError as exc:
            raise ValidationError(f"score {name!r} missing for some subject") from exc

    def score_names(self) -> list[str]:
        return list(self.subjects[0].scores.keys())


@dataclass(frozen=True)
class SyntheticGroundTruth:
    """Generator parameters kept aside as the oracle for recovery tests."""

    b_true: np.ndarray   # P x K, orthonormal columns
    c_true: np.ndarray   # K x N, nonnegative
    w_true: np.ndarray   # K
    sigma_y: float
    wishart_dof: int

    def __post_init__(self):
        b, c = np.asarray(self.b_true, float), np.asarray(self.c_true, float)
        if np.max(np.abs(b.T @ b - np.eye(b.shape[1]))) > 1e-10:
            raise ValidationError("b_true columns must be orthonormal")
        if c.min() < 0:
            raise ValidationError("c_true must be nonnegative")


def _read_matrix_csv(path):
    try:
        values = np.loadtxt(path, delimiter=",", ndmin=2)
    except OSError as exc:
        raise IoError(f"cannot read matrix file {path!r}: {exc}") from exc
    except ValueError as exc:
        raise ValidationError(f"malformed matrix file {path!r}: {exc}") from exc
    if values.shape[0] != values.shape[1]:
        raise ShapeError(f"matrix file {path!r} is {values.shape[0]}x{values.shape[1]}, expected square")
    return values


def load_cohort(manifest_path: str) -> Cohort:
    """Load and validate a cohort from a manifest CSV.

    Matrix paths are resolved relative to the manifest's directory. Every
    matrix must pass the strict CorrelationMatrix invariants; violations
    raise ValidationError naming the subject.
    """
    try:
        with open(manifest_path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise IoError(f"cannot read manifest {manifest_path!r}: {exc}") from exc
    if not rows or len(rows) < 2:
        raise ValidationError(f"manifest {manifest_path!r} has no subject rows")
    header = [h.strip() for h in rows[0]]
    if header[:2] != ["subject_id", "matrix_path"]:
        raise ValidationError(
            "manifest header must start with 'subject_id,matrix_path', got " + ",".join(header[:2])
        )
    score_names = header[2:]
    base_dir = os.path.dirname(os.path.abspath(manifest_path))

    subjects = []
    for row in rows[1:]:
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != len(header):
            raise ValidationError(f"manifest row for {row[0]!r} has {len(row)} fields, expected {len(header)}")
        sid = row[0].strip()
        matrix_path = row[1].strip()
        if not os.path.isabs(matrix_path):
            matrix_path = os.path.join(base_dir, matrix_path)
        values = _read_matrix_csv(matrix_path)
        try:
            gamma = CorrelationMatrix(values)
        except (ValidationError, ShapeError) as exc:
            raise type(exc)(f"subject {sid!r}: {exc}") from exc
        scores = {}
        for name, cell in zip(score_names, row[2:]):
            try:
                value = float(cell)
            except ValueError as exc:
                raise ValidationError(f"subject {sid!r}: score {name!r} is not a number: {cell!r}") from exc
            if not np.isfinite(value):
                raise ValidationError(f"subject {sid!r}: score {name!r} is not finite")
            scores[name] = value
        subjects.append(Subject(id=sid, gamma=gamma, scores=scores))
    if not subjects:
        raise ValidationError(f"manifest {manifest_path!r} has no subject rows")
    return Cohort(subjects=tuple(subjects))


def save_cohort(cohort: Cohort, out_dir: str, matrix_subdir: str = "matrices") -> str:
    """Write manifest + matrix CSVs under ``out_dir``; returns the manifest path.

    Full-precision formatting, so save -> load round-trips exactly.
    """
    os.makedirs(os.path.join(out_dir, matrix_subdir), exist_ok=True)
    score_names = cohort.score_names()
    manifest_path = os.path.join(out_dir, "manifest.csv")
    with open(manifest_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject_id", "matrix_path"] + score_names)
        for s in cohort.subjects:
            rel = os.path.join(matrix_subdir, f"{s.id}.csv")
            np.savetxt(os.path.join(out_dir, rel), s.gamma.values, fmt=_CSV_FMT, delimiter=",")
            writer.writerow([s.id, rel] + [_CSV_FMT % s.scores[name] for name in score_names])
    return manifest_path


def generate_synthetic(
    p: int,
    k: int,
    n: int,
    sigma_y: float,
    wishart_dof: int,
    seed: int,
    score_name: str = "y",
) -> tuple[Cohort, SyntheticGroundTruth]:
    """Seeded synthetic cohort with known dictionary, loadings and weights.

    Each subject's matrix is a Wishart draw (mean ``B* diag(c_n) B*^T + 0.1 I``,
    ``wishart_dof`` degrees of freedom) renormalized to unit diagonal; scores
    are ``c_n^T w* + Normal(0, sigma_y^2)``. Pure function of the arguments.
    """
    if not 1 <= k < p:
        raise ConfigError(f"need 1 <= k < p, got k={k}, p={p}")
    if n < 1:
        raise ConfigError(f"need n >= 1, got {n}")
    if wishart_dof < p + 2:
        raise ConfigError(f"need wishart_dof >= p + 2 = {p + 2}, got {wishart_dof}")
    if sigma_y < 0:
        raise ConfigError(f"need sigma_y >= 0, got {sigma_y}")

    rng = np.random.default_rng(seed)
    b_true, _ = np.linalg.qr(rng.standard_normal((p, k)))
    c_true = np.abs(rng.standard_normal((k, n)))
    w_true = rng.standard_normal(k)
    y = c_true.T @ w_true + sigma_y * rng.standard_normal(n)

    subjects = []
    width = max(3, len(str(n - 1)))
    for i in range(n):
        mean = b_true @ (c_true[:, i, None] * b_true.T) + SYNTHETIC_RIDGE * np.eye(p)
        chol = np.linalg.cholesky(mean)
        draws = rng.standard_normal((wishart_dof, p)) @ chol.T
        wish = draws.T @ draws / wishart_dof
        d = np.sqrt(np.diag(wish))
        gamma = wish / np.outer(d, d)
        np.fill_diagonal(gamma, 1.0)
        gamma = 0.5 * (gamma + gamma.T)
        subjects.append(
            Subject(id=f"s{i:0{width}d}", gamma=CorrelationMatrix(gamma),
                    scores={score_name: float(y[i])})
        )
    truth = SyntheticGroundTruth(
        b_true=b_true, c_true=c_true, w_true=w_true,
        sigma_y=float(sigma_y), wishart_dof=int(wishart_dof),
    )
    return Cohort(subjects=tuple(subjects)), truth


def scree_eigenvalues(cohort: Cohort) -> np.ndarray:
    """Descending eigenvalues of the elementwise mean of the cohort matrices.

    Informs the user's choice of the basis size K (look for the elbow).
    """
    mean_matrix = cohort.matrices().mean(axis=0)
    eigvals = np.linalg.eigvalsh(mean_matrix)
    return eigvals[::-1]
