import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import grads_close
from patchmix_reid.bank import CenterBank, c2c_loss, c2c_terms
from patchmix_reid.errors import InputError
from patchmix_reid.losses import LossWeights
from patchmix_reid.patchmix import Modality

RGB, IR = Modality.RGB, Modality.IR
f64 = torch.float64


def filled_bank(y=3, p=2, d=4, seed=0, **kw):
    g = torch.Generator().manual_seed(seed)
    bank = CenterBank(y, p, d, dtype=f64, **kw)
    labels = list(range(y)) * 2
    mods = [RGB] * y + [IR] * y
    bank.update(torch.randn(2 * y, d, generator=g, dtype=f64), torch.randn(2 * y, p, d, generator=g, dtype=f64),
                labels, mods)
    return bank


def test_first_observation_sets_center():
    bank = CenterBank(2, 1, 3)
    v = torch.tensor([[1.0, 2.0, 3.0]])
    bank.update(v, v[:, None], [1], [IR])
    assert torch.equal(bank.centers[1, 1, 0], v[0])
    assert bank.initialized.tolist() == [[False, False], [False, True]]


def test_ema_hand_step():
    bank = CenterBank(1, 1, 3, momentum=0.1)
    bank.update(torch.zeros(1, 3), None, [0], [RGB])
    bank.update(torch.ones(1, 3), None, [0], [RGB])
    torch.testing.assert_close(bank.centers[0, 0, 0], torch.full((3,), 0.1))


def test_fixed_point():
    bank = filled_bank()
    before = bank.centers.clone()
    bank.update(before[:, 0, 0], before[:, 0, 1:], [0, 1, 2], [RGB] * 3)
    torch.testing.assert_close(bank.centers, before, rtol=0, atol=1e-12)


def test_ema_contraction():
    bank = CenterBank(1, 1, 2, momentum=0.25, dtype=f64)
    bank.update(torch.zeros(1, 2, dtype=f64), None, [0], [RGB])
    target = torch.tensor([[4.0, -2.0]], dtype=f64)
    for k in range(1, 8):
        bank.update(target, None, [0], [RGB])
        err = (bank.centers[0, 0, 0] - target[0]).norm()
        assert float(err) == pytest.approx(0.75 ** k * float(target.norm()), rel=1e-12)


def test_label_range():
    with pytest.raises(InputError):
        CenterBank(2, 1, 2).update(torch.zeros(1, 2), None, [2], [RGB])
    with pytest.raises(InputError):
        CenterBank(2, 1, 2, momentum=0.0)


def test_c2c_hand():
    bank = CenterBank(1, 1, 2, start_epoch=0)
    bank.update(torch.tensor([[1.0, 0.0], [0.0, 1.0]]), torch.zeros(2, 1, 2), [0, 0], [RGB, IR])
    assert c2c_loss(bank, 5, 0.0, LossWeights(lambda2=0.2)).item() == pytest.approx(0.4)


def test_c2c_zero_cases():
    bank = filled_bank(start_epoch=10)
    assert c2c_loss(bank, 9, 0.5, LossWeights()).item() == 0.0
    same = CenterBank(2, 2, 3, start_epoch=0)
    f, pf = torch.randn(2, 3), torch.randn(2, 2, 3)
    same.update(torch.cat([f, f]), torch.cat([pf, pf]), [0, 1, 0, 1], [RGB, RGB, IR, IR])
    assert abs(c2c_loss(same, 3, 0.5, LossWeights()).item()) < 1e-9


def test_c2c_zero_until_initialized():
    bank = CenterBank(2, 1, 2, start_epoch=0)
    bank.update(torch.ones(2, 2), None, [0, 0], [RGB, IR])
    assert c2c_loss(bank, 1, 0.5, LossWeights()).item() == 0.0


def test_c2c_weighting():
    bank = filled_bank(start_epoch=0)
    g, p = c2c_terms(bank)
    w = LossWeights(lambda2=0.3, lambda3=0.7)
    assert c2c_loss(bank, 1, 0.4, w).item() == pytest.approx(0.3 * g.item() + 0.4 * 0.7 * p.item(), rel=1e-12)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_c2c_permutation_invariant(seed):
    bank = filled_bank(seed=seed, start_epoch=0)
    perm = torch.randperm(3, generator=torch.Generator().manual_seed(seed))
    other = CenterBank(3, 2, 4, dtype=f64, start_epoch=0)
    other.load_state_dict({**bank.state_dict(), "centers": bank.centers[perm]})
    w = LossWeights()
    assert c2c_loss(bank, 1, 0.5, w).item() == pytest.approx(c2c_loss(other, 1, 0.5, w).item(), rel=1e-12)


def test_update_order_independent():
    a, b = CenterBank(4, 1, 2, dtype=f64), CenterBank(4, 1, 2, dtype=f64)
    x = torch.randn(4, 2, dtype=f64)
    a.update(x, None, [0, 1, 2, 3], [RGB, IR, RGB, IR])
    b.update(x[[3, 2, 1, 0]], None, [3, 2, 1, 0], [IR, RGB, IR, RGB])
    assert torch.equal(a.centers, b.centers)


def test_gradient_reaches_batch_only():
    bank = filled_bank(start_epoch=0)
    feats = torch.randn(6, 4, dtype=f64, requires_grad=True)
    bank.update(feats, None, [0, 1, 2, 0, 1, 2], [RGB] * 3 + [IR] * 3)
    c2c_loss(bank, 1, 0.5, LossWeights()).backward()
    assert feats.grad is not None and feats.grad.abs().sum() > 0
    assert not bank.centers.requires_grad


def test_c2c_batch_gradient_matches_fd():
    base = filled_bank(start_epoch=0).state_dict()
    labels, mods = [0, 1, 2, 0, 1, 2], [RGB] * 3 + [IR] * 3
    w = LossWeights()

    def fn(x):
        bank = CenterBank(3, 2, 4, dtype=f64)
        bank.load_state_dict(base)
        bank.update(x[:, 0], x[:, 1:], labels, mods)
        return c2c_loss(bank, 1, 0.5, w)

    assert grads_close(fn, torch.randn(6, 3, 4, dtype=f64))


def test_state_roundtrip():
    bank = filled_bank()
    other = CenterBank(1, 1, 1)
    other.load_state_dict(bank.state_dict())
    assert torch.equal(other.centers, bank.centers) and other.parts == 2 and other.dim == 4
