import itertools

import numpy as np
import pytest
import torch

from causaldg.embeddings import FeatureEmbedding
from causaldg.errors import ConfigError, ContractError
from causaldg.intervention import InterventionConfig, intervene


def pair(batch=4, n_q=3, h=8, seed=0):
    rng = np.random.default_rng(seed)
    q_ca = FeatureEmbedding(torch.tensor(rng.normal(size=(batch, n_q, h))), "disease", "causal")
    q_sp = FeatureEmbedding(torch.tensor(rng.normal(size=(batch, n_q, h))), "disease", "spurious")
    return q_ca, q_sp


class TestContracts:
    def test_drop_prob_one_is_identity(self):
        q_ca, q_sp = pair()
        out = intervene(q_ca, q_sp, InterventionConfig(drop_prob=1.0, rng_seed=3))
        assert torch.equal(out.values, q_ca.values)
        assert out.kind == "intervened"

    def test_single_sample_no_drop(self):
        q_ca, q_sp = pair(batch=1)
        out = intervene(q_ca, q_sp, InterventionConfig(drop_prob=0.0, rng_seed=5))
        assert torch.allclose(out.values, q_ca.values + q_sp.values)

    def test_no_drop_diffs_are_spurious_row_permutation(self):
        # Brute force over all 4! permutations: the observed row pairing must
        # be exactly one of them.
        q_ca, q_sp = pair(batch=4)
        out = intervene(q_ca, q_sp, InterventionConfig(drop_prob=0.0, rng_seed=9))
        diffs = (out.values - q_ca.values).numpy()
        sp = q_sp.values.numpy()
        matching = [
            perm
            for perm in itertools.permutations(range(4))
            if all(np.allclose(diffs[i], sp[perm[i]], atol=1e-12) for i in range(4))
        ]
        assert len(matching) == 1

    def test_invalid_drop_prob(self):
        with pytest.raises(ConfigError):
            InterventionConfig(drop_prob=1.5)

    def test_kind_mismatch_rejected(self):
        q_ca, q_sp = pair()
        with pytest.raises(ContractError):
            intervene(q_sp, q_ca, InterventionConfig())

    def test_shape_mismatch_rejected(self):
        q_ca, _ = pair(n_q=3)
        _, q_sp = pair(n_q=4)
        with pytest.raises(ContractError):
            intervene(q_ca, q_sp, InterventionConfig())

    def test_branch_mismatch_rejected(self):
        q_ca, q_sp = pair()
        other = FeatureEmbedding(q_sp.values, "domain", "spurious")
        with pytest.raises(ContractError):
            intervene(q_ca, other, InterventionConfig())


class TestStatistics:
    def test_reproducible_under_fixed_seed(self):
        q_ca, q_sp = pair()
        a = intervene(q_ca, q_sp, InterventionConfig(drop_prob=0.3, rng_seed=42))
        b = intervene(q_ca, q_sp, InterventionConfig(drop_prob=0.3, rng_seed=42))
        assert torch.equal(a.values, b.values)
        c = intervene(q_ca, q_sp, InterventionConfig(drop_prob=0.3, rng_seed=43))
        assert not torch.equal(a.values, c.values)

    def test_monte_carlo_mean_matches_expectation(self):
        # E[Q_bd - Q_ca] = (1 - p) * mean_row(Q_sp); check each entry stays
        # within 3 sigma of it over 10000 seeded draws. Draw seeds come from
        # a SeedSequence: consecutive raw integers give correlated streams.
        drop_prob = 0.3
        q_ca, q_sp = pair(batch=4, n_q=2, h=5, seed=1)
        n_draws = 10_000
        draw_seeds = np.random.SeedSequence(777).generate_state(n_draws)
        acc = torch.zeros_like(q_ca.values)
        for s in draw_seeds:
            out = intervene(q_ca, q_sp, InterventionConfig(drop_prob=drop_prob, rng_seed=int(s)))
            acc += out.values - q_ca.values
        mc_mean = (acc / n_draws).numpy()
        sp = q_sp.values.numpy()
        expected = (1 - drop_prob) * sp.mean(axis=0, keepdims=True)
        # Var(m * X) with m ~ Bernoulli(1-p) and X uniform over rows.
        second_moment = (sp**2).mean(axis=0, keepdims=True)
        var = (1 - drop_prob) * second_moment - expected**2
        sigma = np.sqrt(var / n_draws)
        z = np.abs(mc_mean - expected) / np.maximum(sigma, 1e-12)
        assert z.max() <= 3.0, f"max z-score {z.max():.2f}"

    def test_gradients_flow_through_both_addends(self):
        q_ca, q_sp = pair()
        ca = q_ca.values.clone().requires_grad_(True)
        sp = q_sp.values.clone().requires_grad_(True)
        out = intervene(
            FeatureEmbedding(ca, "disease", "causal"),
            FeatureEmbedding(sp, "disease", "spurious"),
            InterventionConfig(drop_prob=0.0, rng_seed=0),
        )
        out.values.sum().backward()
        assert torch.all(ca.grad == 1.0)
        assert torch.all(sp.grad == 1.0)  # permutation only reorders rows
