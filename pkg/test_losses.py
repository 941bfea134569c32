import math

import pytest
import torch
import torch.nn.functional as F

from errors import InvalidInputError
from losses import (
    KDConfig,
    LossWeights,
    ece_loss,
    ekl_loss,
    evidence_activation,
    kd_loss,
    total_loss,
)


def _t(rows):
    return torch.tensor(rows, dtype=torch.float64)


def test_ece_loss_examples():
    y = _t([[1, 0]])
    assert float(ece_loss(_t([[1, 1]]), y)) == pytest.approx(math.log(2), abs=1e-6)
    assert float(ece_loss(_t([[2, 1]]), y)) == pytest.approx(math.log(3) - math.log(2), abs=1e-6)
    assert float(ece_loss(_t([[1001, 1]]), y)) == pytest.approx(math.log(1002 / 1001), abs=1e-9)


def test_ekl_loss_examples():
    y = _t([[1, 0]])
    # alpha_tilde = y + (1 - y) * alpha
    assert float(ekl_loss(_t([[1, 1]]), y)) == pytest.approx(0.0, abs=1e-9)
    assert float(ekl_loss(_t([[1, 2]]), y)) == pytest.approx(math.log(2) - 0.5, abs=1e-6)
    assert float(ekl_loss(_t([[1, 1, 1]]), _t([[0, 1, 0]]))) == pytest.approx(0.0, abs=1e-9)


def test_ekl_ignores_true_class_evidence():
    y = _t([[1, 0, 0]])
    assert float(ekl_loss(_t([[50, 1, 1]]), y)) == pytest.approx(0.0, abs=1e-9)


def test_ekl_mask_restricts_to_new_classes():
    # 2 old + 2 new classes; misleading evidence on an old class is ignored
    alpha = _t([[1, 9, 1, 2]])
    y = _t([[0, 0, 1, 0]])
    mask = torch.tensor([False, False, True, True])
    masked = float(ekl_loss(alpha, y, mask))
    assert masked == pytest.approx(math.log(2) - 0.5, abs=1e-6)

    # pinning the old coordinates to 1 gives a different (larger-support) KL
    pinned = float(ekl_loss(alpha, y, mask, restrict=False))
    assert pinned > 0 and pinned != pytest.approx(masked)


def test_ece_falls_as_true_class_evidence_grows():
    y = _t([[0, 1, 0]])
    values = [float(ece_loss(_t([[3.0, 1.0 + e, 2.0]]), y)) for e in (0.0, 0.5, 1.0, 4.0, 20.0, 500.0)]
    assert all(later < earlier for earlier, later in zip(values, values[1:])), values


def test_ekl_charges_evidence_on_masked_wrong_class():
    # 2 old + 2 new classes; the true class is new, the other new class holds evidence
    y = _t([[0, 0, 1, 0]])
    mask = torch.tensor([False, False, True, True])
    for evidence in (0.01, 1.0, 30.0):
        assert float(ekl_loss(_t([[1, 1, 5, 1 + evidence]]), y, mask)) > 0
    assert float(ekl_loss(_t([[40, 40, 5, 1]]), y, mask)) == pytest.approx(0.0, abs=1e-9)


def test_ekl_mask_needs_two_classes():
    with pytest.raises(InvalidInputError):
        ekl_loss(_t([[1, 2, 3]]), _t([[1, 0, 0]]), torch.tensor([True, False, False]))


def test_ekl_empty_batch_is_zero():
    alpha = torch.ones((0, 3), dtype=torch.float64)
    assert float(ekl_loss(alpha, alpha.clone())) == 0.0


def test_shape_mismatch_rejected():
    with pytest.raises(InvalidInputError):
        ece_loss(_t([[1, 1, 1]]), _t([[1, 0]]))


def test_kd_loss_examples():
    z = _t([[1.0, -2.0, 0.5]])
    assert float(kd_loss(z, z, KDConfig(2.0, 3))) == pytest.approx(0.0, abs=1e-12)
    assert float(kd_loss(_t([[0, 1]]), _t([[1, 0]]), KDConfig(1.0, 2))) == pytest.approx(math.tanh(0.5), abs=1e-6)
    assert float(kd_loss(_t([[5, 5]]), _t([[5, 5]]), KDConfig(2.0, 2))) == pytest.approx(0.0, abs=1e-12)


def test_kd_loss_zero_only_for_matching_distributions():
    cfg = KDConfig(2.0, 3)
    teacher = _t([[1.0, -2.0, 0.5], [0.0, 0.0, 3.0]])
    # a per-row constant shift leaves the softmax unchanged
    shifted = teacher + _t([[4.0], [-7.5]])
    assert float(kd_loss(shifted, teacher, cfg)) == pytest.approx(0.0, abs=1e-12)

    for bump in (1e-3, 0.5, 5.0):
        student = teacher.clone()
        student[1, 0] += bump
        assert float(kd_loss(student, teacher, cfg)) > 0


def test_kd_loss_only_reads_old_classes():
    teacher = _t([[1.0, 0.0]])
    student = _t([[1.0, 0.0, 25.0, -3.0]])
    assert float(kd_loss(student, teacher, KDConfig(2.0, 2))) == pytest.approx(0.0, abs=1e-12)


def test_kd_loss_undefined_without_old_classes():
    with pytest.raises(InvalidInputError):
        kd_loss(_t([[1, 0]]), _t([[1, 0]]), KDConfig(2.0, 0))


def test_total_loss_examples():
    assert total_loss(1.0, 0.5, 0.0, LossWeights(0.5, 0.5, 0.0)) == pytest.approx(0.75)
    assert total_loss(1.0, 1.0, 1.0, LossWeights(0.45, 0.5, 0.05)) == pytest.approx(1.0)
    assert total_loss(0.0, 0.0, 0.0, LossWeights(0.3, 0.2, 0.9)) == 0.0


def test_loss_weights_validated():
    with pytest.raises(InvalidInputError):
        LossWeights(-0.1, 0.5, 0.0)
    with pytest.raises(InvalidInputError):
        LossWeights(0.5, float("nan"), 0.0)


# -----------------------------
# Gradients through logits -> exp evidence -> alpha
# -----------------------------
def _random_batch(seed: int, n: int = 4, c: int = 4):
    g = torch.Generator().manual_seed(seed)
    logits = torch.randn(n, c, generator=g, dtype=torch.float64) * 1.5
    labels = torch.randint(0, c, (n,), generator=g)
    return logits.requires_grad_(True), F.one_hot(labels, c).double()


@pytest.mark.parametrize("seed", range(50))
def test_ece_and_ekl_gradients(seed):
    logits, y = _random_batch(seed)

    def ece(z):
        return ece_loss(evidence_activation(z) + 1.0, y)

    def ekl(z):
        return ekl_loss(evidence_activation(z) + 1.0, y)

    assert torch.autograd.gradcheck(ece, (logits,), eps=1e-6, atol=1e-6, rtol=1e-4)
    assert torch.autograd.gradcheck(ekl, (logits,), eps=1e-6, atol=1e-6, rtol=1e-4)


@pytest.mark.parametrize("seed", range(10))
def test_kd_gradient(seed):
    student, _ = _random_batch(seed)
    teacher, _ = _random_batch(seed + 100)
    teacher = teacher.detach()
    cfg = KDConfig(temperature=2.0, old_class_count=3)
    assert torch.autograd.gradcheck(lambda z: kd_loss(z, teacher, cfg), (student,), eps=1e-6, atol=1e-6, rtol=1e-4)
