"""Loss values against hand-derived oracles."""
import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from mmslt.pretrain import (AlignmentHead, align_loss, cosine_matrix, dm_loss, global_pool,
                            mmlp_loss, retrieval_accuracy)
from mmslt.translate import decoder_io, slt_loss


def test_align_single_pair_is_zero():
    M = torch.randn(1, 5)
    assert align_loss(M, torch.randn(1, 5), 0.07).item() == 0.0


def test_align_orthonormal_pairs():
    # logits = I, each row: -log(e / (e + 1)) = ln(1 + 1/e)
    M = torch.eye(2, dtype=torch.float64)
    got = align_loss(M, M.clone(), torch.tensor(1.0, dtype=torch.float64)).item()
    assert abs(got - math.log(1 + math.exp(-1))) < 1e-6
    assert abs(got - 0.3132616875182228) < 1e-12


def test_align_is_scale_invariant_and_symmetric():
    M, L = torch.randn(4, 6, dtype=torch.float64), torch.randn(4, 6, dtype=torch.float64)
    a = align_loss(M, L, 0.5)
    assert torch.allclose(a, align_loss(3 * M, 0.2 * L, 0.5))
    assert torch.allclose(a, align_loss(L, M, 0.5))


def test_align_rejects_bad_shapes():
    with pytest.raises(ValueError):
        align_loss(torch.randn(2, 3), torch.randn(3, 3), 1.0)
    with pytest.raises(ValueError):
        cosine_matrix(torch.zeros(1, 3), torch.ones(1, 3))


def test_dm_hand_case():
    D_hat = torch.tensor([[[1.0, 1.0], [0.0, 0.0], [9.0, 9.0]]], dtype=torch.float64)
    D = torch.tensor([[[-1.0, 1.0], [0.0, 2.0], [0.0, 0.0]]], dtype=torch.float64)
    mask = torch.tensor([[True, True, False]])
    # (4 + 4) / 2 real positions; the padded row is ignored
    assert abs(dm_loss(D_hat, D, mask).item() - 4.0) < 1e-9


def test_dm_errors():
    with pytest.raises(ValueError):
        dm_loss(torch.zeros(1, 2, 3), torch.zeros(1, 2, 4), torch.ones(1, 2, dtype=torch.bool))
    with pytest.raises(ValueError):
        dm_loss(torch.zeros(1, 2, 3), torch.zeros(1, 2, 3), torch.zeros(1, 2, dtype=torch.bool))


@pytest.mark.parametrize("V", [4, 7, 50])
@pytest.mark.parametrize("eps", [0.0, 0.2])
def test_slt_uniform_logits(V, eps):
    logits = torch.zeros(2, 3, V, dtype=torch.float64)
    targets = torch.randint(0, V, (2, 3))
    assert abs(slt_loss(logits, targets, smoothing=eps).item() - math.log(V)) < 1e-6


def test_slt_smoothing_formula():
    logits = torch.tensor([[[2.0, 0.0, -1.0]]], dtype=torch.float64)
    lp = torch.log_softmax(logits, -1)[0, 0]
    expect = 0.9 * -lp[0] + 0.1 * -lp.mean()
    assert torch.isclose(slt_loss(logits, torch.tensor([[0]]), smoothing=0.1), expect)


def test_slt_mask_excludes_padding():
    logits = torch.randn(1, 3, 5, dtype=torch.float64)
    t = torch.tensor([[1, 2, 0]])
    full = slt_loss(logits[:, :2], t[:, :2])
    masked = slt_loss(logits, t, torch.tensor([[True, True, False]]))
    assert torch.isclose(full, masked)


def test_decoder_io_layout():
    tokens = torch.tensor([[5, 6, 7], [8, 0, 0]])
    mask = tokens != 0
    inp, tgt, m = decoder_io(tokens, mask, bos=1, eos=2, pad=0)
    assert inp.tolist() == [[1, 5, 6, 7], [1, 8, 0, 0]]
    assert tgt.tolist() == [[5, 6, 7, 2], [8, 2, 0, 0]]
    assert m.tolist() == [[True] * 4, [True, True, False, False]]


def test_mmlp_loss_and_head():
    assert mmlp_loss(1.0, 2.0, 0.1) == pytest.approx(1.2)
    with pytest.raises(ValueError):
        mmlp_loss(1.0, 1.0, -0.5)
    head = AlignmentHead()
    assert head.tau.item() == pytest.approx(0.07)


def test_global_pool_ignores_padding():
    x = torch.tensor([[[1.0], [3.0], [100.0]]])
    assert global_pool(x, torch.tensor([[True, True, False]])).item() == 2.0
    with pytest.raises(ValueError):
        global_pool(x, torch.zeros(1, 3, dtype=torch.bool))


def test_retrieval_accuracy_permutation():
    L = torch.eye(4)
    assert retrieval_accuracy(L, L) == 1.0
    assert retrieval_accuracy(L[[1, 0, 2, 3]], L) == 0.5


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.floats(0.05, 5.0))
def test_align_bounds(B, tau):
    # InfoNCE with cosine logits lies in [0, ln B + 2 / tau]
    g = torch.Generator().manual_seed(B)
    M, L = torch.randn(B, 4, generator=g), torch.randn(B, 4, generator=g)
    v = align_loss(M, L, tau).item()
    assert 0.0 <= v <= math.log(B) + 2.0 / tau + 1e-6
