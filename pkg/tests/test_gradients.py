"""Autograd against central finite differences (float64, h = 1e-5)."""
import torch

from helpers import check_grads
from mmslt.models import DescriptionMapper, FeatureSeq, LoRALinear, ModalityAdapter, lora_forward
from mmslt.pretrain import align_loss
from mmslt.translate import slt_loss

TOL = 1e-4


def _seq(B, T, C, role, lengths):
    mask = torch.arange(T)[None] < torch.tensor(lengths)[:, None]
    return FeatureSeq(torch.randn(B, T, C, dtype=torch.float64, requires_grad=True), mask, role)


def test_grad_description_mapper():
    dm = DescriptionMapper(5, 7, 3).double()
    V = _seq(2, 4, 5, "V", [4, 2])
    params = [V.values, dm.fc1.weight, dm.fc2.bias]
    assert check_grads(lambda: (dm(V).values ** 2).sum(), params) < TOL


def test_grad_modality_adapter():
    ma = ModalityAdapter(6, 4, 5, kernel=5).double()
    V = _seq(2, 5, 4, "V", [5, 3])
    D = FeatureSeq(torch.randn(2, 5, 2, dtype=torch.float64, requires_grad=True), V.mask, "D_hat")
    w = torch.randn(2, 3, 4, dtype=torch.float64)
    params = [V.values, D.values, ma.conv.weight, ma.fc1.weight, ma.fc2.weight]
    assert check_grads(lambda: (ma(V, D).values * w).sum(), params) < TOL


def test_grad_lora_forward():
    lin = torch.nn.Linear(4, 3).double()
    ad = LoRALinear(lin, rank=2, alpha=4.0).double()
    with torch.no_grad():
        ad.lora_B.normal_()
    x = torch.randn(5, 4, dtype=torch.float64, requires_grad=True)
    w = torch.randn(5, 3, dtype=torch.float64)
    params = [x, ad.lora_A, ad.lora_B]
    assert check_grads(lambda: (lora_forward(lin.weight, ad, x, lin.bias) * w).sum(), params) < TOL


def test_grad_align_loss():
    M = torch.randn(4, 6, dtype=torch.float64, requires_grad=True)
    L = torch.randn(4, 6, dtype=torch.float64, requires_grad=True)
    tau = torch.tensor(0.3, dtype=torch.float64, requires_grad=True)
    assert check_grads(lambda: align_loss(M, L, tau), [M, L, tau]) < TOL


def test_grad_align_loss_log_temperature():
    s = torch.tensor(1.2, dtype=torch.float64, requires_grad=True)
    M, L = torch.randn(3, 5, dtype=torch.float64), torch.randn(3, 5, dtype=torch.float64)
    assert check_grads(lambda: align_loss(M, L, torch.exp(-s)), [s]) < TOL


def test_grad_slt_loss():
    logits = torch.randn(2, 4, 6, dtype=torch.float64, requires_grad=True)
    t = torch.randint(0, 6, (2, 4))
    mask = torch.tensor([[True] * 4, [True, True, False, False]])
    assert check_grads(lambda: slt_loss(logits, t, mask, 0.2), [logits]) < TOL
