import pytest
import torch
from torch.testing import assert_close

from exp.analogy.config import ModelConfig
from exp.analogy.errors import DimensionError
from exp.analogy.model import (
    KGEModel,
    complex_to_analogy,
    expand_block_diag,
    grad_triple,
    init_params,
    make_circulant,
    score_analogy,
    score_complex,
    score_distmult,
    score_hole,
    score_triple,
)
from exp.analogy.spectral import commutes, is_normal, read_blocks

KINDS = ("analogy", "distmult", "complex", "hole")


def _layout_n(kind: str, m: int) -> int:
    if kind != "analogy":
        return 0
    n = m // 2
    return n - 1 if (m - n) % 2 else n


def test_analogy_rotation_block():
    assert float(score_analogy([1.0, 0.0], [0.0, 1.0], [0.0, 1.0], n=0)) == -1.0


def test_analogy_identity_relation_is_dot_product():
    g = torch.Generator().manual_seed(0)
    s, o = torch.randn(2, 10, generator=g, dtype=torch.float64)
    identity = torch.tensor([1.0] * 4 + [1.0, 0.0] * 3, dtype=torch.float64)
    assert_close(score_analogy(s, identity, o, n=4), s @ o)


def test_analogy_zero_object():
    assert float(score_analogy([1.0, 2.0, 3.0, 4.0], [5.0, 6.0, 7.0, 8.0], [0.0] * 4, n=2)) == 0.0


def test_analogy_layout_violation():
    with pytest.raises(DimensionError):
        score_analogy([1.0] * 5, [1.0] * 5, [1.0] * 5, n=2)


def test_distmult_examples():
    assert float(score_distmult([1.0, 2.0], [3.0, 4.0], [5.0, 6.0])) == 63.0
    s, o = torch.tensor([1.5, -2.0, 0.5]), torch.tensor([0.25, 3.0, -1.0])
    assert_close(score_distmult(s, torch.ones(3), o), (s * o).sum().double())
    r = torch.tensor([0.3, -0.7, 2.0])
    assert float(score_distmult(s, r, o)) == float(score_distmult(o, r, s))


def test_dimension_mismatch():
    with pytest.raises(DimensionError):
        score_distmult([1.0, 2.0], [1.0, 2.0, 3.0], [1.0, 2.0])


def test_complex_worked_example():
    # (Im, Re) pairs: 1+2i, 3+4i, 5+6i
    s, r, o = [2.0, 1.0], [4.0, 3.0], [6.0, 5.0]
    assert float(score_complex(s, r, o)) == pytest.approx(35.0, abs=1e-12)
    us, blocks, uo = complex_to_analogy(s, r, o)
    assert blocks.tolist() == [3.0, 4.0]
    assert float(score_analogy(us, blocks, uo, n=0)) == pytest.approx(35.0, abs=1e-12)


def test_complex_identity_relation():
    g = torch.Generator().manual_seed(1)
    s, o = torch.randn(2, 8, generator=g, dtype=torch.float64)
    one = torch.tensor([0.0, 1.0] * 4, dtype=torch.float64)
    assert_close(score_complex(s, one, o), s @ o)


def test_complex_odd_dimension():
    with pytest.raises(DimensionError):
        score_complex([1.0] * 3, [1.0] * 3, [1.0] * 3)


def test_make_circulant_layout():
    assert make_circulant([1.0, 2.0, 3.0]).tolist() == [[1.0, 3.0, 2.0], [2.0, 1.0, 3.0], [3.0, 2.0, 1.0]]
    assert make_circulant([1.0]).tolist() == [[1.0]]
    with pytest.raises(DimensionError):
        make_circulant([])


def test_circulants_are_normal_and_commute():
    g = torch.Generator().manual_seed(2)
    a, b = (make_circulant(torch.randn(7, generator=g, dtype=torch.float64)) for _ in range(2))
    assert is_normal(a, 1e-12)
    assert commutes(a, b, 1e-12)


def test_hole_examples():
    assert float(score_hole([1.0, 0.0, 0.0], [1.0, 2.0, 3.0], [0.0, 1.0, 0.0])) == 3.0
    g = torch.Generator().manual_seed(3)
    s, o = torch.randn(2, 6, generator=g, dtype=torch.float64)
    e1 = torch.zeros(6, dtype=torch.float64)
    e1[0] = 1.0
    assert_close(score_hole(s, e1, o), s @ o)


def test_expand_block_diag():
    dense = expand_block_diag([5.0, 7.0, 1.0, 2.0], m=4, n=2)
    assert dense.tolist() == [[5.0, 0.0, 0.0, 0.0], [0.0, 7.0, 0.0, 0.0], [0.0, 0.0, 1.0, -2.0], [0.0, 0.0, 2.0, 1.0]]
    params = torch.tensor([1.0, -2.0, 3.0], dtype=torch.float64)
    assert_close(expand_block_diag(params, 3, 3), torch.diag(params))
    assert not expand_block_diag(torch.zeros(6), 6, 2).any()
    with pytest.raises(DimensionError):
        expand_block_diag([1.0, 2.0, 3.0], m=3, n=2)


@pytest.mark.parametrize("m, n", [(2, 0), (8, 4), (16, 8), (64, 10)])
def test_packed_score_matches_dense_form(m, n):
    g = torch.Generator().manual_seed(m + n)
    s, r, o = torch.randn(3, 50, m, generator=g, dtype=torch.float64)
    dense = torch.einsum("bi,bij,bj->b", s, expand_block_diag(r, m, n), o)
    assert_close(score_analogy(s, r, o, n), dense, atol=1e-12, rtol=0)


def test_analogy_recovers_distmult():
    g = torch.Generator().manual_seed(4)
    s, r, o = torch.randn(3, 10_000, 12, generator=g, dtype=torch.float64)
    assert_close(score_analogy(s, r, o, n=12), score_distmult(s, r, o), atol=1e-15, rtol=0)


def test_analogy_recovers_complex():
    g = torch.Generator().manual_seed(5)
    s, r, o = torch.randn(3, 10_000, 10, generator=g, dtype=torch.float64)
    us, blocks, uo = complex_to_analogy(s, r, o)
    assert_close(score_analogy(us, blocks, uo, n=0), score_complex(s, r, o), atol=1e-12, rtol=0)


def test_block_products_stay_in_family():
    g = torch.Generator().manual_seed(6)
    m, n = 16, 8
    for _ in range(100):
        a, b = expand_block_diag(torch.randn(2, m, generator=g, dtype=torch.float64), m, n)
        ab, ba = a @ b, b @ a
        assert_close(ab, ba, atol=1e-12, rtol=0)
        assert_close(ab, expand_block_diag(read_blocks(ab, n), m, n), atol=1e-12, rtol=0)
        assert is_normal(a, 1e-12)
        assert commutes(a, b, 1e-12)


def _finite_difference(kind: str, s, r, o, n: int, h: float = 1e-2):
    # every score is linear in each argument, so the central difference is exact up to rounding
    m = s.shape[0]
    eye = torch.eye(m, dtype=torch.float64) * h

    def central(which: int) -> torch.Tensor:
        args = [t.expand(m, m) for t in (s, r, o)]
        plus, minus = list(args), list(args)
        plus[which] = args[which] + eye
        minus[which] = args[which] - eye
        return (score_triple(kind, *plus, n) - score_triple(kind, *minus, n)) / (2 * h)

    return central(0), central(2), central(1)


@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("m", [4, 16, 50])
def test_gradients_match_finite_differences(kind, m):
    g = torch.Generator().manual_seed(m)
    n = _layout_n(kind, m)
    for _ in range(100):
        s, r, o = torch.randn(3, m, generator=g, dtype=torch.float64)
        grad = grad_triple(kind, s, r, o, n)
        for analytic, numeric in zip((grad.d_subject, grad.d_object, grad.d_relation), _finite_difference(kind, s, r, o, n)):
            err = ((analytic - numeric).abs() / numeric.abs().clamp_min(1e-8)).max()
            assert err <= 1e-5


@pytest.mark.parametrize("kind", KINDS)
def test_zero_object_zeroes_subject_and_relation_grads(kind):
    g = torch.Generator().manual_seed(7)
    s, r = torch.randn(2, 8, generator=g, dtype=torch.float64)
    grad = grad_triple(kind, s, r, torch.zeros(8, dtype=torch.float64), _layout_n(kind, 8))
    assert not grad.d_relation.any()
    assert not grad.d_subject.any()
    assert grad.is_finite()


def test_distmult_subject_gradient():
    s, r, o = torch.tensor([1.0, 2.0]), torch.tensor([3.0, 4.0]), torch.tensor([5.0, 6.0])
    assert grad_triple("distmult", s, r, o).d_subject.tolist() == [15.0, 24.0]


def test_init_params_deterministic_and_bounded():
    config = ModelConfig(dim=4)
    a = init_params(config, (2, 3), seed=11)
    b = init_params(config, (2, 3), seed=11)
    c = init_params(config, (2, 3), seed=12)
    assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])
    assert a[0].shape == (2, 4)
    assert a[0].abs().max() <= config.init_bound
    assert not torch.equal(a[0], c[0])
    with pytest.raises(DimensionError):
        init_params(config, (0, 3), seed=0)


@pytest.mark.parametrize("kind", KINDS)
def test_score_all_candidates_matches_pointwise(kind):
    config = ModelConfig(model_kind=kind, dim=8, init_bound=1.0)
    model = KGEModel(config, num_entities=12, num_relations=3, seed=8)
    queries = torch.tensor([[0, 1, 5], [3, 2, 7], [11, 0, 0]])
    tails = model.score_all_tails(queries[:, 0], queries[:, 1])
    heads = model.score_all_heads(queries[:, 1], queries[:, 2])
    for i, (s, r, o) in enumerate(queries.tolist()):
        candidates = torch.arange(12)
        as_tail = torch.stack([torch.full((12,), s), torch.full((12,), r), candidates], dim=1)
        as_head = torch.stack([candidates, torch.full((12,), r), torch.full((12,), o)], dim=1)
        assert_close(tails[i], model.score(as_tail), atol=1e-12, rtol=0)
        assert_close(heads[i], model.score(as_head), atol=1e-12, rtol=0)


def test_model_from_tables_checks_width():
    with pytest.raises(DimensionError):
        KGEModel.from_tables(ModelConfig(dim=4), torch.zeros(3, 5), torch.zeros(1, 5))
