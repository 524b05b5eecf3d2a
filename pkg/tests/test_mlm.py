import numpy as np
import pytest

from clozefew import autodiff as ad
from clozefew.autodiff import Tensor
from clozefew.mlm import (
    AdamW,
    Classifier,
    ClassifierHead,
    CountingBackend,
    MaskLogits,
    SequenceLengthError,
    TabularBackend,
    TinyTransformer,
    TinyTransformerConfig,
    clip_global_norm,
    collect_gradients,
    forward_classify,
    forward_masked,
    load_checkpoint,
    save_checkpoint,
    softmax_rows,
)
from clozefew.vocab import sequence


def masked_seq(vocab, n_masks=1, context=(4, 5, 6)):
    ids = list(context) + [vocab.mask_id] * n_masks + [7]
    return sequence(vocab, ids)


class TestTabularBackend:
    def test_primed_distribution_returned_exactly(self, sent_vocab):
        tab = TabularBackend(sent_vocab, seed=1)
        z = masked_seq(sent_vocab)
        target = {sent_vocab.id_of("great"): 0.7, sent_vocab.id_of("awful"): 0.3}
        tab.prime(z, 0, target)
        probs = forward_masked(tab, z).probs()[0]
        assert probs[sent_vocab.id_of("great")] == pytest.approx(0.7, abs=1e-9)
        assert probs[sent_vocab.id_of("awful")] == pytest.approx(0.3, abs=1e-9)

    def test_unseen_keys_are_replayable(self, sent_vocab):
        a = TabularBackend(sent_vocab, seed=9)
        b = TabularBackend(sent_vocab, seed=9)
        z = masked_seq(sent_vocab, n_masks=2)
        np.testing.assert_array_equal(a.mask_logits(z).rows, b.mask_logits(z).rows)

    def test_key_includes_context(self, sent_vocab):
        # permuting duplicate context tokens changes the lookup key
        tab = TabularBackend(sent_vocab, seed=9)
        z1 = sequence(sent_vocab, [4, 5, sent_vocab.mask_id, 5, 4])
        z2 = sequence(sent_vocab, [5, 4, sent_vocab.mask_id, 4, 5])
        assert not np.array_equal(tab.mask_logits(z1).rows, tab.mask_logits(z2).rows)

    def test_key_includes_slot(self, sent_vocab):
        tab = TabularBackend(sent_vocab, seed=9)
        z = masked_seq(sent_vocab, n_masks=2)
        rows = tab.mask_logits(z).rows
        assert not np.array_equal(rows[0], rows[1])

    def test_softmax_rows_sum_to_one(self, sent_vocab):
        tab = TabularBackend(sent_vocab, seed=2)
        probs = forward_masked(tab, masked_seq(sent_vocab, 3)).probs()
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)


class TestForwardMasked:
    def test_requires_a_mask(self, sent_vocab, tabular):
        with pytest.raises(ValueError):
            forward_masked(tabular, sequence(sent_vocab, [4, 5, 6]))

    def test_length_limit(self, small_model, sent_vocab):
        ids = [4] * (small_model.config.max_positions + 1)
        ids[0] = sent_vocab.mask_id
        with pytest.raises(SequenceLengthError):
            forward_masked(small_model, sequence(sent_vocab, ids))

    def test_untrained_model_is_finite_and_normalized(self, small_model, sent_vocab):
        out = forward_masked(small_model, masked_seq(sent_vocab, 2))
        assert np.all(np.isfinite(out.rows))
        np.testing.assert_allclose(out.probs().sum(axis=1), 1.0, atol=1e-6)

    def test_mask_logits_must_be_finite(self):
        with pytest.raises(ValueError):
            MaskLogits(np.array([[1.0, np.inf]]))


class TestClassifier:
    def test_zero_head_gives_uniform(self, small_model, sent_vocab):
        clf = Classifier(small_model, ClassifierHead.zeros(3, small_model.config.model_dim))
        logits = forward_classify(clf, masked_seq(sent_vocab))
        probs = softmax_rows(logits[None, :])[0]
        np.testing.assert_allclose(probs, 1 / 3, atol=1e-12)

    def test_logit_arity(self, small_model, sent_vocab):
        clf = Classifier(small_model, ClassifierHead.zeros(2, small_model.config.model_dim))
        assert forward_classify(clf, masked_seq(sent_vocab)).shape == (2,)


class TestGradients:
    def test_model_gradients_match_finite_differences(self, small_model, sent_vocab):
        ids = [4, 5, sent_vocab.mask_id, 6]
        target = sent_vocab.id_of("great")

        def loss_graph():
            logits = small_model.logits_graph(ids)
            log_probs = ad.log_softmax(ad.take_rows(logits, [2]), axis=-1)
            return -ad.tsum(ad.take_entries(log_probs, [0], [target]))

        loss = loss_graph()
        grads = collect_gradients(small_model, loss)
        gen = np.random.default_rng(0)
        h = 1e-5
        for name, p in small_model.parameters():
            if name not in grads:
                continue
            flat = p.data.reshape(-1)
            gflat = grads[name].reshape(-1)
            for idx in gen.choice(flat.size, size=min(2, flat.size), replace=False):
                orig = flat[idx]
                flat[idx] = orig + h
                up = loss_graph().item()
                flat[idx] = orig - h
                dn = loss_graph().item()
                flat[idx] = orig
                numeric = (up - dn) / (2 * h)
                denom = max(abs(numeric), abs(gflat[idx]), 1e-8)
                assert abs(numeric - gflat[idx]) / denom < 1e-3
        small_model.zero_grad()

    def test_non_finite_loss_aborts(self, small_model):
        with pytest.raises(FloatingPointError):
            collect_gradients(small_model, Tensor(np.array(np.nan)))

    def test_constant_loss_zero_gradients(self, small_model):
        loss = ad.tsum(small_model.token_emb * 0.0)
        grads = collect_gradients(small_model, loss)
        np.testing.assert_allclose(grads["token_emb"], 0.0)
        small_model.zero_grad()


class TestOptimizer:
    def test_clip_bounds_global_norm(self, small_model):
        for _, p in small_model.parameters():
            p.grad = np.full_like(p.data, 1000.0)
        params = small_model.parameters()
        pre = clip_global_norm(params, 1.0)
        assert pre > 1.0
        post = np.sqrt(sum(float((p.grad**2).sum()) for _, p in params))
        assert post <= 1.0 + 1e-9
        small_model.zero_grad()

    def test_clip_leaves_small_gradients_alone(self, small_model):
        for _, p in small_model.parameters():
            p.grad = np.full_like(p.data, 1e-9)
        before = [p.grad.copy() for _, p in small_model.parameters()]
        clip_global_norm(small_model.parameters(), 1.0)
        for (_, p), b in zip(small_model.parameters(), before):
            np.testing.assert_array_equal(p.grad, b)
        small_model.zero_grad()

    def test_adam_moves_parameters(self, small_model):
        params = small_model.parameters()
        before = params[0][1].data.copy()
        for _, p in params:
            p.grad = np.ones_like(p.data)
        AdamW(params, lr=1e-3).step()
        assert not np.array_equal(params[0][1].data, before)

    def test_weight_decay_skips_vectors(self, sent_vocab, small_config):
        model = TinyTransformer(small_config, sent_vocab)
        params = model.parameters()
        for _, p in params:
            p.grad = np.zeros_like(p.data)
        gains = model.ln_f_g.data.copy()
        mats = model.token_emb.data.copy()
        AdamW(params, lr=1e-2, weight_decay=0.5).step()
        np.testing.assert_array_equal(model.ln_f_g.data, gains)
        assert not np.array_equal(model.token_emb.data, mats)


class TestDeterminism:
    def test_same_seed_same_parameters(self, small_config, sent_vocab):
        a = TinyTransformer(small_config, sent_vocab)
        b = TinyTransformer(small_config, sent_vocab)
        for (_, pa), (_, pb) in zip(a.parameters(), b.parameters()):
            np.testing.assert_array_equal(pa.data, pb.data)

    def test_clone_is_independent(self, small_model):
        other = small_model.clone()
        other.token_emb.data += 1.0
        assert not np.array_equal(other.token_emb.data, small_model.token_emb.data)


class TestCheckpoint:
    def test_round_trip(self, tmp_path, small_model, sent_vocab):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, small_model)
        loaded, state = load_checkpoint(path, sent_vocab)
        assert state is None
        for (_, pa), (_, pb) in zip(small_model.parameters(), loaded.parameters()):
            np.testing.assert_array_equal(pa.data.astype(np.float32), pb.data.astype(np.float32))

    def test_optimizer_state_round_trip(self, tmp_path, small_model, sent_vocab):
        params = small_model.parameters()
        opt = AdamW(params, lr=1e-3)
        for _, p in params:
            p.grad = np.ones_like(p.data)
        opt.step()
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, small_model, opt)
        _, state = load_checkpoint(path, sent_vocab)
        t, m, v = state
        assert t == 1
        np.testing.assert_allclose(m[0], opt.m[0].astype(np.float32))

    def test_classifier_round_trip(self, tmp_path, small_model, sent_vocab):
        clf = Classifier(small_model, ClassifierHead.zeros(4, small_model.config.model_dim))
        clf.head.weight.data += 0.5
        path = tmp_path / "c.ckpt"
        save_checkpoint(path, clf)
        loaded, _ = load_checkpoint(path, sent_vocab)
        assert isinstance(loaded, Classifier)
        assert loaded.head.num_labels == 4
        np.testing.assert_allclose(loaded.head.weight.data, 0.5)

    def test_bad_magic_rejected(self, tmp_path, sent_vocab):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(ValueError):
            load_checkpoint(path, sent_vocab)

    def test_vocab_size_mismatch_rejected(self, tmp_path, small_model):
        from clozefew.vocab import SPECIAL_TOKENS, Vocabulary

        path = tmp_path / "m.ckpt"
        save_checkpoint(path, small_model)
        tiny = Vocabulary(SPECIAL_TOKENS + ("a",))
        with pytest.raises(ValueError):
            load_checkpoint(path, tiny)


class TestSoftmaxStability:
    def test_logit_shift_leaves_probs_unchanged(self, sent_vocab, tabular):
        z = masked_seq(sent_vocab)
        rows = tabular.mask_logits(z).rows
        np.testing.assert_allclose(
            softmax_rows(rows), softmax_rows(rows + 500.0), atol=1e-9
        )
