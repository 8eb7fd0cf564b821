import math

import numpy as np
import pytest
import torch

from docalign.errors import DomainError, NumericError
from docalign.objectives import (
    Temperature,
    combined_loss,
    normalize_patches,
    reconstruction_loss,
    text_to_patch_loss,
)

from oracles import entropy, scalar_reconstruction, scalar_text_to_patch


def random_instance(rng, L=None, N=None, d=None):
    L = L or int(rng.integers(1, 9))
    N = N or int(rng.integers(2, 17))
    d = d or int(rng.integers(2, 9))
    text = rng.normal(size=(L, d))
    image = rng.normal(size=(N, d))
    targets = rng.random((L, N)) * (rng.random((L, N)) < 0.5)
    valid = rng.random(L) < 0.7
    valid[rng.integers(L)] = True
    for i in range(L):
        if not valid[i]:
            targets[i] = 0
        elif targets[i].sum() == 0:
            targets[i, rng.integers(N)] = 1.0
        else:
            targets[i] /= targets[i].sum()
    log_scale = float(rng.uniform(-1, 3))
    return text, image, targets, valid, log_scale


def tp_loss(text, image, targets, valid, log_scale, **kw):
    loss, _ = text_to_patch_loss(
        torch.as_tensor(text, dtype=torch.float64),
        torch.as_tensor(image, dtype=torch.float64),
        targets,
        valid,
        torch.tensor(log_scale, dtype=torch.float64),
        **kw,
    )
    return loss


class TestTextToPatchLoss:
    def test_uniform_similarity_one_hot(self):
        text = torch.ones(1, 3)
        image = torch.ones(4, 3)
        targets = np.array([[0, 0, 1.0, 0]])
        loss = tp_loss(text, image, targets, [True], 2.0)
        assert loss.item() == pytest.approx(math.log(4), abs=1e-12)

    def test_minimum_is_entropy(self):
        rng = np.random.default_rng(0)
        y = rng.random(6) + 0.1
        y /= y.sum()
        # unnormalized: logits log(y) realised with scale 1 and one-dim embeddings
        text = torch.ones(1, 6, dtype=torch.float64)
        image = torch.diag(torch.as_tensor(np.log(y)))
        loss = tp_loss(text, image, y[None], [True], 0.0, normalize=False)
        assert loss.item() == pytest.approx(entropy(y), abs=1e-10)

    @pytest.mark.parametrize("normalize", [True, False])
    @pytest.mark.parametrize("average", ["valid", "context"])
    def test_matches_scalar_oracle(self, normalize, average):
        rng = np.random.default_rng(1)
        for _ in range(25):
            text, image, targets, valid, ls = random_instance(rng)
            got = tp_loss(text, image, targets, valid, ls, normalize=normalize, average=average).item()
            want = scalar_text_to_patch(
                text.tolist(), image.tolist(), targets.tolist(), valid.tolist(), ls, normalize, average
            )
            assert got == pytest.approx(want, abs=1e-10, rel=1e-10)

    def test_batched_is_mean_over_pages(self):
        rng = np.random.default_rng(2)
        pages = [random_instance(rng, L=5, N=8, d=4) for _ in range(3)]
        log_scale = 1.3
        batched = tp_loss(
            np.stack([p[0] for p in pages]),
            np.stack([p[1] for p in pages]),
            np.stack([p[2] for p in pages]),
            np.stack([p[3] for p in pages]),
            log_scale,
        ).item()
        single = np.mean([tp_loss(p[0], p[1], p[2], p[3], log_scale).item() for p in pages])
        assert batched == pytest.approx(single, abs=1e-12)

    def test_invalid_rows_are_neutral(self):
        rng = np.random.default_rng(3)
        text, image, targets, valid, ls = random_instance(rng, L=6, N=10, d=5)
        valid[:] = [True, False, True, False, True, False]
        targets[~valid] = 0
        base = tp_loss(text, image, targets, valid, ls).item()
        text2 = text.copy()
        text2[~valid] += rng.normal(size=(3, 5)) * 10
        assert tp_loss(text2, image, targets, valid, ls).item() == base

    def test_patch_permutation_equivariance(self):
        rng = np.random.default_rng(4)
        text, image, targets, valid, ls = random_instance(rng, L=5, N=12, d=6)
        perm = rng.permutation(12)
        a = tp_loss(text, image, targets, valid, ls).item()
        b = tp_loss(text, image[perm], targets[:, perm], valid, ls).item()
        assert a == pytest.approx(b, abs=1e-12)

    def test_no_patch_to_text_term(self):
        """A symmetric variant (adding patch->text cross-entropy) gives a different value."""
        rng = np.random.default_rng(5)
        text, image, targets, valid, ls = random_instance(rng, L=4, N=6, d=3)
        valid[:] = True
        targets = np.full((4, 6), 1 / 6)
        ours = tp_loss(text, image, targets, valid, ls).item()
        t = torch.nn.functional.normalize(torch.as_tensor(text), dim=-1)
        v = torch.nn.functional.normalize(torch.as_tensor(image), dim=-1)
        logits = math.exp(ls) * (v @ t.T)  # patches x tokens
        yt = torch.as_tensor(targets.T / targets.T.sum(1, keepdims=True))
        reverse = -(yt * torch.log_softmax(logits, dim=-1)).sum(-1).mean().item()
        assert ours != pytest.approx(0.5 * (ours + reverse), abs=1e-6)
        assert ours == pytest.approx(
            scalar_text_to_patch(text.tolist(), image.tolist(), targets.tolist(), [True] * 4, ls), abs=1e-12
        )

    def test_all_invalid_returns_zero_with_warning(self):
        with pytest.warns(RuntimeWarning):
            loss = tp_loss(np.ones((3, 2)), np.ones((4, 2)), np.zeros((3, 4)), [False] * 3, 0.0)
        assert loss.item() == 0.0

    def test_non_finite_raises(self):
        text = np.ones((2, 3))
        text[0, 0] = np.nan
        with pytest.raises(NumericError):
            tp_loss(text, np.ones((4, 3)), np.eye(2, 4), [True, True], 0.0)

    def test_shape_mismatch(self):
        with pytest.raises(DomainError):
            tp_loss(np.ones((2, 3)), np.ones((4, 3)), np.zeros((2, 5)), [True, True], 0.0)

    def test_lower_bound_entropy(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            text, image, targets, valid, ls = random_instance(rng)
            for i in np.flatnonzero(valid):
                li = tp_loss(text[i : i + 1], image, targets[i : i + 1], [True], ls).item()
                assert li >= entropy(targets[i]) - 1e-12

    def test_temperature_positive(self):
        for ls in (-50.0, 0.0, 5.0):
            assert Temperature(torch.tensor(ls)).scale.item() > 0


def finite_difference_grad(fn, x, eps=1e-5):
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        up = fn()
        flat[k] = orig - eps
        down = fn()
        flat[k] = orig
        g[k] = (up - down) / (2 * eps)
    return grad


def relative_error(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


def check_gradients(seed):
    rng = np.random.default_rng(seed)
    text, image, targets, valid, ls = random_instance(rng, d=int(rng.integers(2, 6)))
    t = torch.tensor(text, requires_grad=True)
    v = torch.tensor(image, requires_grad=True)
    s = torch.tensor(ls, dtype=torch.float64, requires_grad=True)
    loss, _ = text_to_patch_loss(t, v, targets, valid, s)
    loss.backward()
    ls_box = np.array([ls])

    def f():
        return scalar_text_to_patch(text.tolist(), image.tolist(), targets.tolist(), valid.tolist(), ls_box[0])

    errs = (
        relative_error(t.grad.numpy(), finite_difference_grad(f, text)),
        relative_error(v.grad.numpy(), finite_difference_grad(f, image)),
        relative_error(np.array([s.grad.item()]), finite_difference_grad(f, ls_box)),
    )
    return errs


@pytest.mark.parametrize("seed", range(5))
def test_gradients_match_finite_differences(seed):
    assert max(check_gradients(seed)) < 1e-4


class TestReconstructionLoss:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.orig = torch.as_tensor(rng.random((6, 16)))
        self.mask = torch.tensor([True, False, True, True, False, False])

    def test_perfect_prediction(self):
        pred = normalize_patches(self.orig)
        loss, n = reconstruction_loss(pred, self.orig, self.mask)
        assert loss.item() == pytest.approx(0.0, abs=1e-15)
        assert n == 3

    def test_unit_offset(self):
        pred = normalize_patches(self.orig) + 1.0
        loss, _ = reconstruction_loss(pred, self.orig, self.mask)
        assert loss.item() == pytest.approx(1.0, abs=1e-12)

    def test_unmasked_predictions_ignored(self):
        rng = np.random.default_rng(1)
        pred = torch.as_tensor(rng.normal(size=(6, 16)))
        a, _ = reconstruction_loss(pred, self.orig, self.mask)
        pred2 = pred.clone()
        pred2[~self.mask] = 1e6
        b, _ = reconstruction_loss(pred2, self.orig, self.mask)
        assert a.item() == b.item()

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(30):
            n, d = int(rng.integers(1, 17)), int(rng.integers(2, 20))
            orig = rng.random((n, d))
            if rng.random() < 0.2:
                orig[0] = 0.5  # constant patch hits the variance floor
            pred = rng.normal(size=(n, d))
            mask = rng.random(n) < 0.5
            got, _ = reconstruction_loss(torch.as_tensor(pred), torch.as_tensor(orig), torch.as_tensor(mask))
            want = scalar_reconstruction(pred.tolist(), orig.tolist(), mask.tolist())
            assert got.item() == pytest.approx(want, abs=1e-10, rel=1e-10)

    def test_empty_mask(self):
        loss, n = reconstruction_loss(self.orig.clone(), self.orig, torch.zeros(6, dtype=torch.bool))
        assert loss.item() == 0.0 and n == 0

    def test_shape_mismatch(self):
        with pytest.raises(DomainError):
            reconstruction_loss(self.orig[:, :8], self.orig, self.mask)


class TestCombinedLoss:
    def test_without_reconstruction(self):
        assert combined_loss(2.0, 3.0, 0) == 2.0

    def test_with_reconstruction(self):
        assert combined_loss(2.0, 3.0, 1) == 5.0

    def test_rejects_other_weights(self):
        with pytest.raises(DomainError):
            combined_loss(2.0, 3.0, 0.5)

    def test_continuous_override(self):
        assert combined_loss(2.0, 3.0, 0.5, allow_continuous=True) == 3.5
