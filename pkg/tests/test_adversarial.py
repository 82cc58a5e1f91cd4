import math

import numpy as np
import pytest

from polyformer.adversarial import adv_loss, build_discriminator
from polyformer.engine import ContractError, Tensor, backward, ops


def silent_disc(in_ch=4, lam=1.0):
    d = build_discriminator(in_ch, lam, seed=0)
    last = d.stage[-1].conv
    last.weight.data[:] = 0
    last.bias.data[:] = 0
    return d


def maps(b=2, c=4, hw=8, seed=0):
    return np.random.default_rng(seed).standard_normal((b, c, hw, hw))


class TestDiscriminator:
    def test_one_logit_per_image(self):
        d = build_discriminator(4)
        assert d(Tensor(maps(3))).shape == (3,)

    def test_zero_logit_loss_is_ln2(self):
        loss = adv_loss(silent_disc(), Tensor(maps()), Tensor(maps(seed=1)))
        assert loss.item() == pytest.approx(math.log(2), abs=1e-6)

    def test_discriminator_weights_descend(self):
        # the reversal only affects what flows into the inputs
        d = build_discriminator(4, seed=1)
        src, tgt = maps(seed=2), maps(seed=3) + 1.0
        before = adv_loss(d, Tensor(src), Tensor(tgt)).item()
        for _ in range(5):
            backward(adv_loss(d, Tensor(src), Tensor(tgt)))
            for p in d.parameters():
                p.data = p.data - np.float32(0.01) * p.grad
                p.grad = None
        assert adv_loss(d, Tensor(src), Tensor(tgt)).item() < before


class TestReversal:
    @pytest.mark.parametrize("lam", [1.0, 0.5, 0.0])
    def test_generator_gradient_is_negated(self, lam):
        d = build_discriminator(4, lam, seed=2)
        src = maps(seed=4)
        grads = []
        for reverse in (True, False):
            tgt = Tensor(maps(seed=5), requires_grad=True)
            backward(adv_loss(d, Tensor(src), tgt, reverse=reverse))
            grads.append(tgt.grad.astype(np.float64))
            for p in d.parameters():
                p.grad = None
        rev, plain = grads
        np.testing.assert_allclose(rev, -lam * plain, rtol=1e-6, atol=1e-12)


class TestContract:
    def test_missing_batch(self):
        with pytest.raises(ContractError):
            adv_loss(build_discriminator(4), Tensor(maps()), None)

    def test_mask_mode_needs_probabilities(self):
        d = build_discriminator(3)
        probs = ops.softmax(Tensor(maps(c=3)), axis=1)
        adv_loss(d, probs, probs, mode="masks")
        with pytest.raises(ContractError):
            adv_loss(d, Tensor(maps(c=3)), probs, mode="masks")

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            adv_loss(build_discriminator(4), Tensor(maps()), Tensor(maps()), mode="pixels")
