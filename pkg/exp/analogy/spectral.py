import itertools
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .errors import DataError, DecompositionError, DimensionError, PreconditionError, SpectralError
from .model import DTYPE, expand_block_diag, score_analogy


@dataclass
class DenseRelation:
    matrix: torch.Tensor

    def __post_init__(self):
        self.matrix = torch.as_tensor(self.matrix, dtype=DTYPE)
        if self.matrix.dim() != 2 or self.matrix.shape[0] != self.matrix.shape[1]:
            raise DimensionError(f"relation matrix must be square, got shape {tuple(self.matrix.shape)}")
        if not torch.isfinite(self.matrix).all():
            raise SpectralError("relation matrix has non-finite entries")

    @property
    def m(self) -> int:
        return self.matrix.shape[0]


MatrixLike = torch.Tensor | DenseRelation


@dataclass
class OrthogonalBasis:
    Q: torch.Tensor

    @property
    def residual(self) -> float:
        m = self.Q.shape[0]
        return float(torch.linalg.matrix_norm(self.Q.T @ self.Q - torch.eye(m, dtype=self.Q.dtype)))

    @property
    def orthonormal(self) -> bool:
        return self.residual <= 1e-10 * self.Q.shape[0]


@dataclass(frozen=True)
class BlockLayout:
    blocks: tuple[str, ...]

    @classmethod
    def from_counts(cls, num_scalars: int, num_pairs: int) -> "BlockLayout":
        return cls(("scalar",) * num_scalars + ("pair",) * num_pairs)

    @property
    def n(self) -> int:
        return self.blocks.count("scalar")

    @property
    def m(self) -> int:
        return self.n + 2 * self.blocks.count("pair")


@dataclass(frozen=True)
class EigenpairDiagnostic:
    """Norm facts of one realified conjugate eigenvector q = a + ib with |q| = 1."""

    eigenvalue: complex
    re_norm_sq: float
    im_norm_sq: float
    cross: float

    @property
    def deviation(self) -> float:
        return max(abs(self.re_norm_sq - 0.5), abs(self.im_norm_sq - 0.5), abs(self.cross))


@dataclass
class BlockDecomposition:
    basis: OrthogonalBasis
    blocks: list[torch.Tensor]
    layout: BlockLayout
    residuals: list[float]
    projection_residual: float
    eigenpairs: list[EigenpairDiagnostic] = field(default_factory=list)
    attempts: int = 1

    @property
    def max_residual(self) -> float:
        return max(self.residuals, default=0.0)


def _as_matrix(a: MatrixLike) -> torch.Tensor:
    return a.matrix if isinstance(a, DenseRelation) else DenseRelation(a).matrix


def is_normal(a: MatrixLike, tol: float = 1e-10) -> bool:
    A = _as_matrix(a)
    gap = torch.linalg.matrix_norm(A @ A.T - A.T @ A)
    return bool(gap <= tol * max(1.0, float(torch.linalg.matrix_norm(A)) ** 2))


def commutes(a: MatrixLike, b: MatrixLike, tol: float = 1e-10) -> bool:
    A, B = _as_matrix(a), _as_matrix(b)
    if A.shape != B.shape:
        raise DimensionError(f"cannot compare {tuple(A.shape)} with {tuple(B.shape)}")
    gap = torch.linalg.matrix_norm(A @ B - B @ A)
    scale = float(torch.linalg.matrix_norm(A)) * float(torch.linalg.matrix_norm(B))
    return bool(gap <= tol * max(1.0, scale))


def check_preconditions(family: Sequence[MatrixLike], tol: float) -> torch.Tensor:
    if not family:
        raise PreconditionError("empty matrix family")
    mats = [_as_matrix(a) for a in family]
    if len({A.shape for A in mats}) != 1:
        raise DimensionError(f"family mixes shapes {sorted({tuple(A.shape) for A in mats})}")
    for i, A in enumerate(mats):
        if not is_normal(A, tol):
            gap = float(torch.linalg.matrix_norm(A @ A.T - A.T @ A))
            raise PreconditionError(f"matrix {i} is not normal (|AA^T - A^TA| = {gap:.3e})")
    for (i, A), (j, B) in itertools.combinations(enumerate(mats), 2):
        if not commutes(A, B, tol):
            gap = float(torch.linalg.matrix_norm(A @ B - B @ A))
            raise PreconditionError(f"matrices {i} and {j} do not commute (|AB - BA| = {gap:.3e})")
    return torch.stack(mats)


def _cluster(evals: torch.Tensor, thresh: float) -> list[list[int]]:
    clusters: list[list[int]] = []
    centers: list[complex] = []
    for i in torch.argsort(evals.real).tolist():
        lam = complex(evals[i])
        for c, center in enumerate(centers):
            if abs(lam - center) <= thresh:
                clusters[c].append(i)
                break
        else:
            clusters.append([i])
            centers.append(lam)
    return clusters


def _real_columns(vecs: torch.Tensor) -> torch.Tensor:
    k = vecs.shape[1]
    if k == 1:
        re, im = vecs.real[:, 0], vecs.imag[:, 0]
        # both parts span the same real line; keep the better conditioned one
        v = re if re.norm() >= im.norm() else im
        return (v / v.norm()).unsqueeze(1)
    U, _, _ = torch.linalg.svd(torch.cat([vecs.real, vecs.imag], dim=1), full_matrices=False)
    return U[:, :k]


def _common_basis(M: torch.Tensor, thresh: float) -> tuple[torch.Tensor, int, list[EigenpairDiagnostic]]:
    evals, evecs = torch.linalg.eig(M)
    real_cols, pair_cols, diagnostics = [], [], []
    upper, lower = 0, 0
    for members in _cluster(evals, thresh):
        center = complex(evals[members].mean())
        vecs = evecs[:, members]
        if abs(center.imag) <= thresh:
            real_cols.append(_real_columns(vecs))
            continue
        if center.imag < 0:
            lower += len(members)
            continue
        upper += len(members)
        q, _ = torch.linalg.qr(vecs)
        for j in range(q.shape[1]):
            a, b = q[:, j].real, q[:, j].imag
            diagnostics.append(EigenpairDiagnostic(center, float(a @ a), float(b @ b), float(a @ b)))
            pair_cols.append(math.sqrt(2.0) * torch.stack([a, b], dim=1))
    if upper != lower:
        raise DecompositionError(f"unpaired conjugate eigenvalues ({upper} above the axis, {lower} below)", float("inf"))
    n = sum(c.shape[1] for c in real_cols)
    Q = torch.cat(real_cols + pair_cols, dim=1)
    # polar factor: nearest orthogonal matrix
    U, _, Vh = torch.linalg.svd(Q)
    return U @ Vh, n, diagnostics


def read_blocks(T: torch.Tensor, n: int) -> torch.Tensor:
    """Project Q^T A Q onto the almost-diagonal layout with n scalars."""
    m = T.shape[-1]
    first = n + 2 * torch.arange((m - n) // 2)
    diag = torch.diagonal(T, dim1=-2, dim2=-1)
    x = (T[..., first, first] + T[..., first + 1, first + 1]) / 2
    y = (T[..., first + 1, first] - T[..., first, first + 1]) / 2
    pairs = torch.stack([x, y], dim=-1).flatten(-2)
    return torch.cat([diag[..., :n], pairs], dim=-1)


def simul_block_diagonalize(
    family: Sequence[MatrixLike],
    tol: float = 1e-8,
    seed: int = 0,
    max_attempts: int = 5,
) -> BlockDecomposition:
    """Real orthogonal Q with Q^T A_i Q almost-diagonal for every member of a
    commuting family of normal matrices, sharing one block layout.

    The common eigenbasis comes from one random combination of the family;
    a bad draw shows up as a large residual and is retried with fresh
    coefficients.
    """
    A = check_preconditions(family, tol)
    k, m, _ = A.shape
    norms = torch.linalg.matrix_norm(A)
    generator = torch.Generator().manual_seed(seed)
    best: BlockDecomposition | None = None
    for attempt in range(1, max_attempts + 1):
        coeffs = torch.randn(k, generator=generator, dtype=DTYPE)
        M = torch.einsum("k,kij->ij", coeffs, A)
        radius = float(torch.linalg.eigvals(M).abs().max())
        thresh = 1e-8 * (radius if radius > 0 else 1.0)
        try:
            Q, n, diagnostics = _common_basis(M, thresh)
        except DecompositionError:
            continue
        T = Q.T @ A @ Q
        blocks = read_blocks(T, n)
        dense = expand_block_diag(blocks, m, n)
        residuals = torch.linalg.matrix_norm(A - Q @ dense @ Q.T)
        projection = float(torch.linalg.matrix_norm(T - dense).max())
        result = BlockDecomposition(
            OrthogonalBasis(Q),
            list(blocks.unbind(0)),
            BlockLayout.from_counts(n, (m - n) // 2),
            residuals.tolist(),
            projection,
            diagnostics,
            attempt,
        )
        if best is None or result.max_residual < best.max_residual:
            best = result
        limit = 10 * tol * norms.clamp_min(torch.finfo(DTYPE).eps)
        if bool((residuals <= limit).all()) and result.basis.orthonormal:
            return result
    residual = best.max_residual if best is not None else float("inf")
    raise DecompositionError(f"no common block basis after {max_attempts} attempts", residual)


@dataclass
class EquivalenceReport:
    max_deviation: float
    passed: bool
    num_triples: int
    decomposition: BlockDecomposition


def verify_corollary_equivalence(
    v: torch.Tensor,
    W: Sequence[MatrixLike],
    triples: torch.Tensor | Sequence[tuple[int, int, int]],
    tol: float = 1e-8,
    seed: int = 0,
) -> EquivalenceReport:
    """Compare v_s^T W_r v_o with the almost-diagonal score on u = vQ."""
    decomposition = simul_block_diagonalize(W, tol, seed)
    v = torch.as_tensor(v, dtype=DTYPE)
    mats = torch.stack([_as_matrix(a) for a in W])
    triples = torch.as_tensor(triples, dtype=torch.long).reshape(-1, 3)
    s, r, o = triples.unbind(1)
    dense = torch.einsum("ti,tij,tj->t", v[s], mats[r], v[o])
    u = v @ decomposition.basis.Q
    blocks = torch.stack(decomposition.blocks)
    packed = score_analogy(u[s], blocks[r], u[o], decomposition.layout.n)
    deviation = float((dense - packed).abs().max()) if len(triples) else 0.0
    return EquivalenceReport(deviation, deviation <= tol, len(triples), decomposition)


def dft_complex_score_oracle(s_vec, r_vec, o_vec) -> float | torch.Tensor:
    """HolE score evaluated in the Fourier domain."""
    s, r, o = (torch.as_tensor(x, dtype=DTYPE) for x in (s_vec, r_vec, o_vec))
    if not s.shape == r.shape == o.shape:
        raise DimensionError(f"vector lengths disagree: {s.shape[-1]}, {r.shape[-1]}, {o.shape[-1]}")
    m = s.shape[-1]
    fs, fr, fo = torch.fft.fft(s), torch.fft.fft(r), torch.fft.fft(o)
    score = (fs.conj() * fr * fo).sum(-1).real / m
    return float(score) if score.dim() == 0 else score


def random_orthogonal(m: int, generator: torch.Generator) -> torch.Tensor:
    q, r = torch.linalg.qr(torch.randn(m, m, generator=generator, dtype=DTYPE))
    return q * torch.sign(torch.diagonal(r))


def planted_family(k: int = 5, m: int = 8, n: int = 4, seed: int = 0) -> tuple[list[torch.Tensor], torch.Tensor, torch.Tensor]:
    """k commuting normal matrices Q0 B_i Q0^T with random same-layout B_i."""
    if not 0 <= n <= m or (m - n) % 2:
        raise DimensionError(f"almost-diagonal layout needs 0 <= n <= m and m - n even, got m={m}, n={n}")
    generator = torch.Generator().manual_seed(seed)
    Q0 = random_orthogonal(m, generator)
    params = torch.randn(k, m, generator=generator, dtype=DTYPE)
    family = [Q0 @ B @ Q0.T for B in expand_block_diag(params, m, n)]
    return family, Q0, params


def read_matrix_file(path: str | Path) -> list[torch.Tensor]:
    path = Path(path)
    lines = [(i, line.split()) for i, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1)]
    lines = [(i, tokens) for i, tokens in lines if tokens]
    if not lines:
        raise DataError(f"{path}: empty matrix file")
    header_no, header = lines[0]
    try:
        m, k = (int(t) for t in header)
    except ValueError:
        raise DataError(f"{path}:{header_no}: expected header 'm k', got {' '.join(header)!r}") from None
    rows = lines[1:]
    if m < 1 or k < 1 or len(rows) != k * m:
        raise DataError(f"{path}: expected {k * m} rows of {m} values for m={m}, k={k}, found {len(rows)}")
    values = []
    for line_no, tokens in rows:
        if len(tokens) != m:
            raise DataError(f"{path}:{line_no}: expected {m} values, got {len(tokens)}")
        try:
            values.append([float(t) for t in tokens])
        except ValueError:
            raise DataError(f"{path}:{line_no}: non-numeric entry") from None
    return list(torch.tensor(values, dtype=DTYPE).reshape(k, m, m).unbind(0))


def write_matrix_file(path: str | Path, family: Sequence[MatrixLike]):
    mats = [_as_matrix(a) for a in family]
    m = mats[0].shape[0]
    lines = [f"{m} {len(mats)}"]
    for A in mats:
        lines.extend(" ".join(repr(float(x)) for x in row) for row in A.tolist())
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
