"""dVAE tests: logits, hard/soft discretization, decoding, and the ELBO terms."""

import numpy as np
import pytest

from pointmpm import autodiff as ad
from pointmpm import tokenizer as tk
from pointmpm.embedder import embed_patches
from pointmpm.pointops import PointCloud, build_patches

DIM, VOCAB, G, K = 16, 8, 8, 4


@pytest.fixture(scope="module")
def tok():
    return tk.init_tokenizer(np.random.default_rng(0), DIM, VOCAB,
                             patch_points=K, feat_knn=3, dtype=np.float64)


@pytest.fixture(scope="module")
def patchset():
    rng = np.random.default_rng(1)
    cloud = PointCloud.ingest(rng.normal(size=(48, 3)))
    return build_patches(cloud, G, K)


class TestEncodeTokens:
    def test_output_shape(self, tok):
        rng = np.random.default_rng(2)
        z = tk.encode_tokens(rng.normal(size=(G, DIM)), tok)
        assert z.shape == (G, VOCAB)

    def test_identical_embeddings_identical_rows(self, tok):
        row = np.random.default_rng(3).normal(size=DIM)
        z = tk.encode_tokens(np.tile(row, (G, 1)), tok).data
        assert np.abs(z - z[0]).max() < 1e-12

    def test_deterministic(self, tok):
        emb = np.random.default_rng(4).normal(size=(G, DIM))
        assert tk.encode_tokens(emb, tok).data.tobytes() == tk.encode_tokens(emb, tok).data.tobytes()

    def test_batched_matches_single(self, tok):
        rng = np.random.default_rng(5)
        emb = rng.normal(size=(3, G, DIM))
        zb = tk.encode_tokens(emb, tok).data
        for i in range(3):
            np.testing.assert_allclose(zb[i], tk.encode_tokens(emb[i], tok).data, atol=1e-12)


class TestHardToken:
    def test_argmax_forced(self):
        out = tk.hard_token(np.array([[0.1, 2.0, -1.0]]))
        np.testing.assert_array_equal(out, [[0.0, 1.0, 0.0]])

    def test_tie_to_lowest_index(self):
        out = tk.hard_token(np.array([[1.0, 1.0, 1.0]]))
        np.testing.assert_array_equal(out, [[1.0, 0.0, 0.0]])

    def test_one_hot_idempotent(self):
        onehot = np.array([[0.0, 0.0, 1.0]])
        np.testing.assert_array_equal(tk.hard_token(onehot), onehot)


class TestGumbel:
    def test_straight_through_exactly_one_hot(self):
        rng = np.random.default_rng(6)
        z = rng.normal(size=(G, VOCAB))
        out = tk.gumbel_discretize(ad.Tensor(z), 0.5, rng, straight_through=True).data
        assert np.all(np.isin(out, (0.0, 1.0)))
        np.testing.assert_array_equal(out.sum(axis=-1), np.ones(G))

    def test_huge_temperature_zero_noise_near_uniform(self):
        z = np.random.default_rng(7).normal(size=(4, 6))
        out = tk.gumbel_discretize(ad.Tensor(z), 1e6, noise=np.zeros_like(z)).data
        assert np.all(out.max(axis=-1) - out.min(axis=-1) < 1e-4)

    def test_argmax_frequencies_match_softmax(self):
        # Gumbel-max property: argmax(z + noise) ~ Categorical(softmax(z))
        logits = np.array([0.5, -0.3, 1.1])
        probs = np.exp(logits) / np.exp(logits).sum()
        rng = np.random.default_rng(8)
        counts = np.zeros(3)
        for _ in range(10_000):
            s = tk.gumbel_discretize(ad.Tensor(logits[None]), 0.3, rng, straight_through=True)
            counts[s.data[0].argmax()] += 1
        np.testing.assert_allclose(counts / 10_000, probs, atol=0.02)

    def test_matches_hard_token_at_small_temperature_zero_noise(self):
        z = np.random.default_rng(9).normal(size=(5, 7))
        st = tk.gumbel_discretize(ad.Tensor(z), 1e-6, noise=np.zeros_like(z),
                                  straight_through=True).data
        np.testing.assert_array_equal(st, tk.hard_token(z))

    def test_straight_through_gradient_nonzero(self):
        z = ad.Tensor(np.random.default_rng(10).normal(size=(3, 4)), requires_grad=True)
        out = tk.gumbel_discretize(z, 0.7, noise=np.zeros((3, 4)), straight_through=True)
        ad.reduce_sum(out * ad.Tensor(np.random.default_rng(11).normal(size=(3, 4)))).backward()
        assert z.grad is not None and np.abs(z.grad).max() > 0

    def test_nonpositive_temperature_rejected(self):
        with pytest.raises(ValueError):
            tk.gumbel_discretize(ad.Tensor(np.zeros((1, 2))), 0.0, np.random.default_rng(0))


class TestDecode:
    def test_output_shape(self, tok, patchset):
        tokens = tk.hard_token(np.random.default_rng(12).normal(size=(G, VOCAB)))
        out = tk.decode(tokens, patchset.centers, tok)
        assert out.shape == (G, K, 3)

    def test_identical_tokens_and_centers_identical_patches(self, tok):
        tokens = np.tile(tk.hard_token(np.random.default_rng(13).normal(size=(1, VOCAB))), (G, 1))
        centers = np.tile(np.array([0.1, 0.2, 0.3]), (G, 1))
        out = tk.decode(tokens, centers, tok).data
        assert np.abs(out - out[0]).max() < 1e-12

    def test_wrong_vocab_width_rejected(self, tok, patchset):
        with pytest.raises(ad.ShapeMismatchError):
            tk.decode(np.zeros((G, VOCAB + 1)), patchset.centers, tok)


class TestDvaeLoss:
    def test_uniform_logits_zero_kl(self, tok, patchset, monkeypatch):
        monkeypatch.setattr(tk, "encode_tokens",
                            lambda emb, p: ad.Tensor(np.zeros(emb.shape[:-1] + (VOCAB,))))
        _, _, kl = tk.dvae_loss(patchset, tok, 0.5, np.random.default_rng(14))
        assert abs(kl.item()) < 1e-9

    def test_kl_bounds(self, tok, patchset):
        for seed in range(5):
            _, _, kl = tk.dvae_loss(patchset, tok, 0.5, np.random.default_rng(seed))
            assert -1e-9 <= kl.item() <= np.log(VOCAB) + 1e-6

    def test_perfect_reconstruction_zero_recon(self, tok, patchset, monkeypatch):
        target = patchset.patches.astype(np.float64)
        monkeypatch.setattr(tk, "decode", lambda tokens, centers, p: ad.Tensor(target))
        _, recon, _ = tk.dvae_loss(patchset, tok, 0.5, np.random.default_rng(15))
        assert recon.item() == 0.0

    def test_total_combines_beta(self, tok, patchset):
        rng_a, rng_b = np.random.default_rng(16), np.random.default_rng(16)
        total0, recon0, kl0 = tk.dvae_loss(patchset, tok, 0.5, rng_a, beta=0.0)
        total1, recon1, kl1 = tk.dvae_loss(patchset, tok, 0.5, rng_b, beta=0.25)
        assert total0.item() == pytest.approx(recon0.item())
        assert total1.item() == pytest.approx(recon1.item() + 0.25 * kl1.item())

    def test_gradients_reach_encoder_through_straight_through(self, tok, patchset):
        total, _, _ = tk.dvae_loss(patchset, tok, 0.5, np.random.default_rng(17), beta=0.1)
        total.backward()
        grads = [tok.proj.w.grad, tok.enc_gcn[0].w.grad, tok.fold2b.w.grad,
                 tok.embed.stage1a.w.grad]
        assert all(g is not None and np.abs(g).max() > 0 for g in grads)
        for _, t in __import__("pointmpm.params", fromlist=["named_parameters"]).named_parameters(tok):
            t.grad = None


class TestFeatureKnn:
    def test_excludes_self_and_breaks_ties_low(self):
        x = np.array([[0.0], [0.0], [1.0], [3.0]])
        idx = tk.feature_knn_indices(x, 2)
        np.testing.assert_array_equal(idx[0], [1, 2])   # self (0) excluded
        np.testing.assert_array_equal(idx[1], [0, 2])

    def test_bad_k(self):
        with pytest.raises(ValueError):
            tk.feature_knn_indices(np.zeros((3, 2)), 3)
