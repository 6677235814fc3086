from collections.abc import Sequence
from dataclasses import dataclass

import torch
import torch.nn as nn
from einops import rearrange

from .config import ModelConfig
from .errors import DimensionError

DTYPE = torch.float64


def _vec(x) -> torch.Tensor:
    return torch.as_tensor(x, dtype=DTYPE)


def _check_dims(*vectors: torch.Tensor) -> int:
    dims = {v.shape[-1] if v.dim() else 0 for v in vectors}
    if len(dims) != 1:
        raise DimensionError(f"embedding dimensions disagree: {sorted(dims)}")
    m = dims.pop()
    if m == 0:
        raise DimensionError("empty embedding vector")
    return m


def _check_layout(m: int, n: int):
    if not 0 <= n <= m or (m - n) % 2:
        raise DimensionError(f"almost-diagonal layout needs 0 <= n <= m and m - n even, got m={m}, n={n}")


def _pairs(v: torch.Tensor, n: int) -> tuple[torch.Tensor, torch.Tensor]:
    p = rearrange(v[..., n:], "... (b two) -> ... b two", two=2)
    return p[..., 0], p[..., 1]


def _unpairs(first: torch.Tensor, second: torch.Tensor) -> torch.Tensor:
    return rearrange(torch.stack([first, second], dim=-1), "... b two -> ... (b two)")


def score_analogy(s_vec, r_params, o_vec, n: int) -> torch.Tensor:
    s, r, o = _vec(s_vec), _vec(r_params), _vec(o_vec)
    m = _check_dims(s, r, o)
    _check_layout(m, n)
    scalar = (r[..., :n] * (s[..., :n] * o[..., :n])).sum(-1)
    p1, p2 = _pairs(s, n)
    q1, q2 = _pairs(o, n)
    x, y = _pairs(r, n)
    pair = x * (p1 * q1 + p2 * q2) + y * (p2 * q1 - p1 * q2)
    return scalar + pair.sum(-1)


def score_distmult(s_vec, r_vec, o_vec) -> torch.Tensor:
    s, r, o = _vec(s_vec), _vec(r_vec), _vec(o_vec)
    _check_dims(s, r, o)
    # r * (s * o) is bitwise symmetric in s and o
    return (r * (s * o)).sum(-1)


def to_complex(v: torch.Tensor) -> torch.Tensor:
    # stored as interleaved (Im, Re) pairs
    im, re = _pairs(v, 0)
    return torch.complex(re, im)


def from_complex(z: torch.Tensor) -> torch.Tensor:
    return _unpairs(z.imag, z.real)


def score_complex(s_vec, r_vec, o_vec) -> torch.Tensor:
    s, r, o = _vec(s_vec), _vec(r_vec), _vec(o_vec)
    m = _check_dims(s, r, o)
    if m % 2:
        raise DimensionError(f"complex embeddings need an even dimension, got {m}")
    return (to_complex(s) * to_complex(r) * to_complex(o).conj()).real.sum(-1)


def complex_relation_to_blocks(r_vec) -> torch.Tensor:
    """Packed (x, y) = (Re, Im) blocks equivalent to a ComplEx relation vector.

    Entity vectors need no change: the (Im, Re) storage already is the
    real embedding that the block form acts on.
    """
    im, re = _pairs(_vec(r_vec), 0)
    return _unpairs(re, im)


def complex_to_analogy(s_vec, r_vec, o_vec) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Map a ComplEx triple onto ANALOGY parameters with n = 0 and the same score."""
    return _vec(s_vec), complex_relation_to_blocks(r_vec), _vec(o_vec)


def _circulant_index(m: int) -> torch.Tensor:
    i = torch.arange(m)
    return (i[:, None] - i[None, :]) % m


def make_circulant(x) -> torch.Tensor:
    v = _vec(x)
    if v.dim() == 0 or v.shape[-1] == 0:
        raise DimensionError("circulant generator must be a non-empty vector")
    return v[..., _circulant_index(v.shape[-1])]


def score_hole(s_vec, r_vec, o_vec) -> torch.Tensor:
    s, r, o = _vec(s_vec), _vec(r_vec), _vec(o_vec)
    _check_dims(s, r, o)
    return torch.einsum("...i,...ij,...j->...", s, make_circulant(r), o)


def expand_block_diag(r_params, m: int, n: int) -> torch.Tensor:
    params = _vec(r_params)
    _check_layout(m, n)
    if params.shape[-1] != m:
        raise DimensionError(f"expected {m} packed parameters, got {params.shape[-1]}")
    out = params.new_zeros(*params.shape[:-1], m, m)
    diag = torch.arange(n)
    out[..., diag, diag] = params[..., :n]
    first = n + 2 * torch.arange((m - n) // 2)
    x, y = _pairs(params, n)
    out[..., first, first] = x
    out[..., first + 1, first + 1] = x
    out[..., first, first + 1] = -y
    out[..., first + 1, first] = y
    return out


@dataclass
class TripleGradient:
    d_subject: torch.Tensor
    d_object: torch.Tensor
    d_relation: torch.Tensor

    def is_finite(self) -> bool:
        return bool(
            torch.isfinite(self.d_subject).all()
            and torch.isfinite(self.d_object).all()
            and torch.isfinite(self.d_relation).all()
        )


def _grad_analogy(s: torch.Tensor, r: torch.Tensor, o: torch.Tensor, n: int) -> TripleGradient:
    _check_layout(s.shape[-1], n)
    p1, p2 = _pairs(s, n)
    q1, q2 = _pairs(o, n)
    x, y = _pairs(r, n)
    d_s = torch.cat([r[..., :n] * o[..., :n], _unpairs(x * q1 - y * q2, y * q1 + x * q2)], dim=-1)
    d_o = torch.cat([r[..., :n] * s[..., :n], _unpairs(x * p1 + y * p2, x * p2 - y * p1)], dim=-1)
    d_r = torch.cat([s[..., :n] * o[..., :n], _unpairs(p1 * q1 + p2 * q2, p2 * q1 - p1 * q2)], dim=-1)
    return TripleGradient(d_s, d_o, d_r)


def _grad_complex(s: torch.Tensor, r: torch.Tensor, o: torch.Tensor) -> TripleGradient:
    if s.shape[-1] % 2:
        raise DimensionError(f"complex embeddings need an even dimension, got {s.shape[-1]}")
    cs, cr, co = to_complex(s), to_complex(r), to_complex(o)
    # d Re(a z) / d(Re a, Im a) = (Re z, -Im z)
    ro, so = cr * co.conj(), cs * co.conj()
    return TripleGradient(from_complex(ro.conj()), from_complex(cs * cr), from_complex(so.conj()))


def _grad_hole(s: torch.Tensor, r: torch.Tensor, o: torch.Tensor) -> TripleGradient:
    m = s.shape[-1]
    circ = make_circulant(r)
    d_s = torch.einsum("...ij,...j->...i", circ, o)
    d_o = torch.einsum("...ij,...i->...j", circ, s)
    outer = (s[..., :, None] * o[..., None, :]).flatten(-2)
    index = _circulant_index(m).flatten().expand_as(outer)
    d_r = outer.new_zeros(*outer.shape[:-1], m).scatter_add_(-1, index, outer)
    return TripleGradient(d_s, d_o, d_r)


def grad_triple(model_kind: str, s_vec, r_params, o_vec, n: int = 0) -> TripleGradient:
    s, r, o = _vec(s_vec), _vec(r_params), _vec(o_vec)
    s, r, o = torch.broadcast_tensors(s, r, o)
    _check_dims(s, r, o)
    match model_kind:
        case "analogy":
            return _grad_analogy(s, r, o, n)
        case "distmult":
            return TripleGradient(r * o, s * r, s * o)
        case "complex":
            return _grad_complex(s, r, o)
        case "hole":
            return _grad_hole(s, r, o)
    raise ValueError(f"unknown model kind {model_kind!r}")


def score_triple(model_kind: str, s_vec, r_params, o_vec, n: int = 0) -> torch.Tensor:
    match model_kind:
        case "analogy":
            return score_analogy(s_vec, r_params, o_vec, n)
        case "distmult":
            return score_distmult(s_vec, r_params, o_vec)
        case "complex":
            return score_complex(s_vec, r_params, o_vec)
        case "hole":
            return score_hole(s_vec, r_params, o_vec)
    raise ValueError(f"unknown model kind {model_kind!r}")


def init_params(config: ModelConfig, vocab_sizes: Sequence[int], seed: int) -> tuple[torch.Tensor, torch.Tensor]:
    num_entities, num_relations = vocab_sizes
    if config.dim <= 0 or num_entities <= 0 or num_relations <= 0:
        raise DimensionError(f"cannot initialize {num_entities}x{config.dim} / {num_relations}x{config.dim} tables")
    g = torch.Generator().manual_seed(seed)
    bound = config.init_bound
    entity = (torch.rand(num_entities, config.dim, generator=g, dtype=DTYPE) * 2 - 1) * bound
    relation = (torch.rand(num_relations, config.dim, generator=g, dtype=DTYPE) * 2 - 1) * bound
    return entity, relation


class KGEModel(nn.Module):
    def __init__(self, config: ModelConfig, num_entities: int, num_relations: int, seed: int = 0):
        super().__init__()
        self.config = config
        entity, relation = init_params(config, (num_entities, num_relations), seed)
        self.entity = nn.Parameter(entity, requires_grad=False)
        self.relation = nn.Parameter(relation, requires_grad=False)

    @classmethod
    def from_tables(cls, config: ModelConfig, entity: torch.Tensor, relation: torch.Tensor) -> "KGEModel":
        if entity.shape[1] != config.dim or relation.shape[1] != config.dim:
            raise DimensionError(f"table widths {entity.shape[1]}/{relation.shape[1]} do not match dim {config.dim}")
        model = cls(config, entity.shape[0], relation.shape[0])
        model.entity.data.copy_(entity.to(DTYPE))
        model.relation.data.copy_(relation.to(DTYPE))
        return model

    @property
    def kind(self) -> str:
        return self.config.model_kind

    @property
    def n(self) -> int:
        return self.config.n

    @property
    def num_entities(self) -> int:
        return self.entity.shape[0]

    @property
    def num_relations(self) -> int:
        return self.relation.shape[0]

    def rows(self, triples: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        return self.entity[triples[:, 0]], self.relation[triples[:, 1]], self.entity[triples[:, 2]]

    def score(self, triples: torch.Tensor) -> torch.Tensor:
        s, r, o = self.rows(triples)
        return score_triple(self.kind, s, r, o, self.n)

    def forward(self, triples: torch.Tensor) -> torch.Tensor:
        return self.score(triples)

    def grad(self, triples: torch.Tensor) -> TripleGradient:
        s, r, o = self.rows(triples)
        return grad_triple(self.kind, s, r, o, self.n)

    def score_all_tails(self, subjects: torch.Tensor, relations: torch.Tensor) -> torch.Tensor:
        # the score is linear in the object, so d(phi)/d(o) scores every candidate at once
        s, r = self.entity[subjects], self.relation[relations]
        query = grad_triple(self.kind, s, r, torch.zeros_like(s), self.n).d_object
        return query @ self.entity.T

    def score_all_heads(self, relations: torch.Tensor, objects: torch.Tensor) -> torch.Tensor:
        r, o = self.relation[relations], self.entity[objects]
        query = grad_triple(self.kind, torch.zeros_like(o), r, o, self.n).d_subject
        return query @ self.entity.T
