import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dehazekit.errors import InputError, NumericError, StateError
from dehazekit.guidance import (
    ImageEmbeddingBackend,
    PromptPair,
    binary_cross_entropy,
    clear_probability,
    cosine_sim,
    haze_loss,
    haze_probabilities,
    haze_probability,
    train_prompts,
)

from conftest import rand_image


@pytest.fixture()
def backend():
    return ImageEmbeddingBackend(dim=16, widths=(4, 8), seed=0)


def trained_pair(dim=16, seed=0):
    pair = PromptPair.init(dim=dim, seed=seed)
    pair.trained = True
    return pair


def prob(img, pair, backend):
    with torch.no_grad():
        return float(haze_probability(img, pair, backend))


class TestCosine:
    def test_self_similarity(self):
        v = torch.tensor([0.3, -1.2, 0.5])
        assert abs(float(cosine_sim(v, v)) - 1.0) < 1e-6

    def test_antipodal(self):
        v = torch.tensor([0.3, -1.2, 0.5])
        assert abs(float(cosine_sim(v, -v)) + 1.0) < 1e-6

    def test_orthogonal(self):
        assert float(cosine_sim(torch.tensor([1.0, 0.0]), torch.tensor([0.0, 1.0]))) == 0.0

    def test_zero_vector(self):
        with pytest.raises(NumericError):
            cosine_sim(torch.zeros(3), torch.ones(3))

    @given(st.integers(0, 10_000))
    @settings(max_examples=25, deadline=None)
    def test_range(self, seed):
        rng = np.random.default_rng(seed)
        a = torch.from_numpy(rng.normal(size=4)) + 1e-3
        b = torch.from_numpy(rng.normal(size=4)) + 1e-3
        assert -1.0 - 1e-9 <= float(cosine_sim(a, b)) <= 1.0 + 1e-9


class TestHazeProbability:
    def test_equal_similarity_gives_half(self, backend):
        img = rand_image(0)
        v = torch.randn(16, generator=torch.Generator().manual_seed(1))
        pair = PromptPair(haze=v, clear=v.clone(), trained=True)
        assert prob(img, pair, backend) == 0.5

    def test_aligned_prompt_closed_form(self, backend):
        # prompts equal to +/- the image embedding pin the similarities to
        # +1 and -1, so p = e / (e + 1/e)
        img = rand_image(1)
        e = backend.encode_image(img.unsqueeze(0))[0].detach()
        pair = PromptPair(haze=e, clear=-e, trained=True)
        expected = math.e / (math.e + 1.0 / math.e)  # 0.8807970779778823
        assert abs(prob(img, pair, backend) - expected) < 1e-5

    def test_opposed_prompt_closed_form(self, backend):
        img = rand_image(1)
        e = backend.encode_image(img.unsqueeze(0))[0].detach()
        pair = PromptPair(haze=-e, clear=e, trained=True)
        expected = 1.0 - math.e / (math.e + 1.0 / math.e)  # 0.1192029...
        assert abs(prob(img, pair, backend) - expected) < 1e-5

    def test_two_class_closure_exact(self, backend):
        img = rand_image(2)
        pair = trained_pair()
        p_haze = prob(img, pair, backend)
        with torch.no_grad():
            p_clear = float(clear_probability(img, pair, backend))
        assert p_haze + p_clear == 1.0

    def test_in_open_interval(self, backend):
        pair = trained_pair(seed=3)
        probs = haze_probabilities(rand_image(3, (4, 3, 16, 16)), pair, backend)
        assert bool(((probs > 0) & (probs < 1)).all())

    @given(st.floats(min_value=0.01, max_value=100.0))
    @settings(max_examples=20, deadline=None)
    def test_invariant_to_prompt_rescaling(self, scale):
        local_backend = ImageEmbeddingBackend(dim=16, widths=(4, 8), seed=0)
        img = rand_image(4)
        pair = trained_pair(seed=4)
        scaled = PromptPair(haze=pair.haze * scale, clear=pair.clear * scale, trained=True)
        p0 = prob(img, pair, local_backend)
        p1 = prob(img, scaled, local_backend)
        assert abs(p0 - p1) < 1e-6


class TestBackend:
    def test_embeddings_unit_norm(self, backend):
        e = backend.encode_image(rand_image(5, (6, 3, 16, 16)))
        norms = e.norm(dim=-1)
        assert bool((norms - 1.0).abs().max() < 1e-6)

    def test_requires_batch(self, backend):
        with pytest.raises(InputError):
            backend.encode_image(rand_image(6))

    def test_save_load_round_trip(self, tmp_path, backend):
        backend.save(tmp_path / "bk")
        loaded = ImageEmbeddingBackend.load(tmp_path / "bk")
        img = rand_image(7, (2, 3, 16, 16))
        assert torch.equal(backend.encode_image(img), loaded.encode_image(img))


class TestBce:
    def test_perfect_confidence_limit(self):
        value = float(binary_cross_entropy(torch.tensor([1.0]), torch.tensor([1.0])))
        assert abs(value) < 1e-9

    def test_half_probability(self):
        value = float(binary_cross_entropy(torch.tensor([0.5]), torch.tensor([1.0])))
        assert abs(value - math.log(2.0)) < 1e-6


class TestTrainPrompts:
    def test_empty_class_rejected(self, backend):
        with pytest.raises(InputError):
            train_prompts([], [rand_image(0)], backend)

    def test_separates_tiny_classes(self, tiny_paired):
        backend = ImageEmbeddingBackend(dim=16, widths=(4, 8), seed=1)
        pair = train_prompts(
            tiny_paired.hazy, tiny_paired.clean, backend, steps=60, lr=5e-3, seed=2
        )
        assert pair.trained
        p_hazy = float(
            haze_probabilities(torch.stack(tiny_paired.hazy), pair, backend).mean()
        )
        p_clean = float(
            haze_probabilities(torch.stack(tiny_paired.clean), pair, backend).mean()
        )
        assert p_hazy > p_clean

    def test_deterministic(self, tiny_paired):
        results = []
        for _ in range(2):
            backend = ImageEmbeddingBackend(dim=16, widths=(4, 8), seed=1)
            results.append(
                train_prompts(tiny_paired.hazy, tiny_paired.clean, backend,
                              steps=10, seed=3)
            )
        assert torch.equal(results[0].haze, results[1].haze)
        assert torch.equal(results[0].clear, results[1].clear)

    def test_prompt_save_load(self, tmp_path):
        pair = trained_pair(seed=5)
        pair.holdout_accuracy = 0.975
        pair.save(tmp_path / "prompts.json")
        loaded = PromptPair.load(tmp_path / "prompts.json")
        assert torch.equal(loaded.haze, pair.haze)
        assert torch.equal(loaded.clear, pair.clear)
        assert loaded.trained and loaded.holdout_accuracy == 0.975


class TestHazeLoss:
    def test_requires_trained_prompts(self, backend):
        pair = PromptPair.init(dim=16, seed=0)
        with pytest.raises(StateError):
            haze_loss(rand_image(8, (2, 3, 16, 16)), pair, backend)

    def test_equals_mean_of_per_image_values(self, backend):
        pair = trained_pair(seed=6)
        batch = rand_image(9, (5, 3, 16, 16))
        with torch.no_grad():
            value = float(haze_loss(batch, pair, backend))
        per_image = [prob(batch[i], pair, backend) for i in range(5)]
        assert abs(value - sum(per_image) / len(per_image)) < 1e-7

    def test_symmetric_prompts_give_half(self, backend):
        v = torch.randn(16, generator=torch.Generator().manual_seed(2))
        pair = PromptPair(haze=v, clear=v.clone(), trained=True)
        with torch.no_grad():
            value = float(haze_loss(rand_image(10, (3, 3, 16, 16)), pair, backend))
        assert value == 0.5

    def test_differentiable_wrt_pixels(self, backend):
        pair = trained_pair(seed=7)
        batch = rand_image(11, (1, 3, 16, 16)).requires_grad_(True)
        haze_loss(batch, pair, backend).backward()
        assert batch.grad is not None and float(batch.grad.abs().sum()) > 0.0
