import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clozefew.mlm import TinyTransformer, forward_classify
from clozefew.pvp import PVP, Example, Pattern, Verbalizer
from clozefew.scoring import (
    DecodingStrategy,
    ScoreTable,
    score_parallel_training,
    score_single_token,
)
from clozefew.training import (
    Augmentations,
    LossWarnings,
    TrainConfig,
    TrainingDivergedError,
    choose_loss_kind,
    classifier_loss_graph,
    cross_entropy_pvp_loss,
    distill_loss,
    finetune,
    hinge_loss,
    pretrain_mlm,
    pvp_loss_graph,
)


def table(scores: dict[int, float], normalized: bool, raw=None) -> ScoreTable:
    if raw is None:
        raw = {y: math.log(max(v, 1e-300)) for y, v in scores.items()}
    return ScoreTable(tuple(sorted(scores)), raw, scores, normalized)


@pytest.fixture()
def sent_task(sent_bundle):
    return sent_bundle.task


@pytest.fixture()
def review_pvp(sent_vocab, sent_task):
    pattern = Pattern.parse("{text} . it was [MASK] .", "review")
    verbalizer = Verbalizer.from_surface(
        "default", {"positive": "great", "negative": "terrible"}, sent_task, sent_vocab
    )
    return PVP(pattern, verbalizer, "review")


@pytest.fixture()
def single_token_pvp(sent_vocab, sent_task):
    verbalizer = Verbalizer.from_surface(
        "default", {"positive": "great", "negative": "awful"}, sent_task, sent_vocab
    )
    return PVP(Pattern.parse("{text} . it was [MASK] .", "r1"), verbalizer, "r1")


class TestConfig:
    def test_defaults_match_contract(self):
        cfg = TrainConfig()
        assert cfg.learning_rate == 1e-5
        assert cfg.adam_epsilon == 1e-8
        assert cfg.weight_decay == 0.01
        assert cfg.max_grad_norm == 1.0
        assert cfg.batch_size == 2
        assert cfg.gradient_accumulation_steps == 8
        assert cfg.max_steps == 250
        assert cfg.max_seq_length == 256
        assert cfg.distillation_temperature == 2.0

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=0.0)
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)


class TestCrossEntropy:
    def test_certain_label_zero_loss(self):
        assert cross_entropy_pvp_loss(table({0: 1.0, 1: 0.0}, True), 0) == 0.0

    def test_half_gives_ln2(self):
        assert cross_entropy_pvp_loss(table({0: 0.5, 1: 0.5}, True), 0) == pytest.approx(math.log(2))

    def test_uniform_three_gives_ln3(self):
        t = table({0: 1 / 3, 1: 1 / 3, 2: 1 / 3}, True)
        assert cross_entropy_pvp_loss(t, 2) == pytest.approx(math.log(3))

    def test_zero_probability_clamped_with_warning(self):
        warnings = LossWarnings()
        loss = cross_entropy_pvp_loss(table({0: 0.0, 1: 1.0}, True), 0, warnings)
        assert loss == pytest.approx(-math.log(1e-12))
        assert warnings.clamped == 1

    def test_requires_normalized(self):
        with pytest.raises(ValueError):
            cross_entropy_pvp_loss(table({0: 0.5, 1: 0.5}, False), 0)


class TestHinge:
    def test_equal_scores_give_margin_one(self):
        assert hinge_loss(table({0: 0.2, 1: 0.2}, False), 0) == pytest.approx(1.0)

    def test_satisfied_margin_zero(self):
        t = table({0: math.exp(-1.0), 1: math.exp(-3.0)}, False)
        assert hinge_loss(t, 0) == pytest.approx(0.0)

    def test_three_label_arithmetic(self):
        # log gaps to the gold label: 0.5 (violates by 0.5) and 1.5 (satisfied)
        t = table(
            {0: math.exp(-1.0), 1: math.exp(-1.5), 2: math.exp(-2.5)},
            False,
        )
        assert hinge_loss(t, 0) == pytest.approx(0.5)

    def test_zero_iff_margin_everywhere(self):
        gen = np.random.default_rng(7)
        for _ in range(50):
            logs = gen.uniform(-6, 0, size=3)
            t = table({y: math.exp(v) for y, v in enumerate(logs)}, False)
            loss = hinge_loss(t, 0)
            satisfied = all(logs[0] - logs[y] >= 1.0 for y in (1, 2))
            assert (loss == 0.0) == satisfied

    @given(st.floats(min_value=0.1, max_value=50.0))
    @settings(max_examples=30, deadline=None)
    def test_scale_invariance(self, factor):
        scores = {0: 0.3, 1: 0.1, 2: 0.05}
        base = hinge_loss(table(scores, False), 1)
        scaled = hinge_loss(table({y: v * factor for y, v in scores.items()}, False), 1)
        assert scaled == pytest.approx(base, rel=1e-9)


class TestDistillLoss:
    def test_matching_student_hits_teacher_entropy_at_t1(self):
        teacher = np.array([0.7, 0.2, 0.1])
        student_logits = np.log(teacher)
        loss = distill_loss(student_logits, teacher, 1.0)
        entropy = -(teacher * np.log(teacher)).sum()
        assert loss == pytest.approx(entropy, abs=1e-9)

    def test_t1_one_hot_is_plain_cross_entropy(self):
        teacher = np.array([0.0, 1.0])
        logits = np.array([0.3, 1.2])
        expected = -(logits[1] - np.log(np.exp(logits).sum()))
        assert distill_loss(logits, teacher, 1.0) == pytest.approx(expected, abs=1e-6)

    def test_teacher_is_minimum(self):
        gen = np.random.default_rng(3)
        teacher = np.array([0.6, 0.3, 0.1])
        best = distill_loss(np.log(teacher), teacher, 1.0)
        for _ in range(20):
            assert distill_loss(gen.standard_normal(3), teacher, 1.0) >= best - 1e-9

    def test_arity_mismatch(self):
        with pytest.raises(ValueError):
            distill_loss(np.zeros(3), np.array([0.5, 0.5]), 2.0)


class TestGraphMatchesDefinitional:
    def test_cross_entropy_paths_agree(self, small_model, sent_vocab, sent_task, single_token_pvp):
        x = Example("e", {"text": "fine soup"}, label=1)
        graph = pvp_loss_graph(
            small_model, single_token_pvp, x, sent_task, sent_vocab, 64, "cross_entropy"
        ).item()
        t = score_single_token(single_token_pvp, small_model, x, sent_task, 64, sent_vocab)
        assert graph == pytest.approx(cross_entropy_pvp_loss(t, 1), abs=1e-9)

    def test_hinge_paths_agree(self, small_model, sent_vocab, sent_task, review_pvp):
        x = Example("e", {"text": "stale bread ."}, label=0)
        graph = pvp_loss_graph(
            small_model, review_pvp, x, sent_task, sent_vocab, 64, "hinge"
        ).item()
        t = score_parallel_training(review_pvp, small_model, x, sent_task, 64, sent_vocab)
        assert graph == pytest.approx(hinge_loss(t, 0), abs=1e-9)

    def test_distill_paths_agree(self, small_model, sent_vocab):
        from clozefew.mlm import Classifier, ClassifierHead

        clf = Classifier(small_model, ClassifierHead.zeros(3, small_model.config.model_dim))
        clf.head.weight.data += np.random.default_rng(0).standard_normal(
            clf.head.weight.shape
        )
        teacher = np.array([0.5, 0.3, 0.2])
        ids = [4, 5, 6]
        graph = classifier_loss_graph(clf, ids, teacher, 2.0).item()
        from clozefew.vocab import sequence

        logits = forward_classify(clf, sequence(sent_vocab, ids))
        assert graph == pytest.approx(distill_loss(logits, teacher, 2.0), abs=1e-9)

    def test_free_form_loss_counts_every_target(self, small_model, sent_vocab, sent_task, review_pvp):
        x = Example("e", {"text": "stale bread ."}, label=0)
        targets = review_pvp.verbalizer.tokens(0) + (sent_vocab.pad_id,)
        loss = pvp_loss_graph(
            small_model, review_pvp, x, sent_task, sent_vocab, 64, "free_form",
            free_form_targets=targets,
        )
        assert loss.item() > 0.0


class TestChooseLossKind:
    def test_single_token_gets_cross_entropy(self, single_token_pvp, sent_task):
        assert choose_loss_kind(single_token_pvp, sent_task) == "cross_entropy"

    def test_multi_token_gets_hinge(self, review_pvp, sent_task):
        assert choose_loss_kind(review_pvp, sent_task) == "hinge"


def tiny_train_cfg(**kw):
    base = dict(
        learning_rate=2e-3,
        batch_size=2,
        gradient_accumulation_steps=2,
        max_steps=12,
        max_seq_length=32,
        seed=11,
    )
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture()
def few_examples(sent_task):
    texts = [
        ("great pizza !", 1),
        ("awful soup .", 0),
        ("the bread was lovely .", 1),
        ("nasty cold stew .", 0),
        ("tasty fresh cake !", 1),
        ("bland stale rice .", 0),
    ]
    return [Example(f"e{i}", {"text": t}, label=y) for i, (t, y) in enumerate(texts)]


class TestFinetune:
    def test_zero_steps_returns_identical_snapshot(
        self, small_model, sent_vocab, sent_task, review_pvp, few_examples
    ):
        snap = finetune(
            small_model, review_pvp, few_examples, sent_task, sent_vocab,
            tiny_train_cfg(max_steps=0),
        )
        assert snap is not small_model
        for (_, a), (_, b) in zip(small_model.parameters(), snap.parameters()):
            np.testing.assert_array_equal(a.data, b.data)

    def test_loss_decreases(
        self, small_model, sent_vocab, sent_task, review_pvp, few_examples, tmp_path
    ):
        import csv

        finetune(
            small_model, review_pvp, few_examples, sent_task, sent_vocab,
            tiny_train_cfg(max_steps=30), log_dir=tmp_path,
        )
        with open(tmp_path / "metrics.csv") as handle:
            rows = list(csv.DictReader(handle))
        losses = [float(r["loss"]) for r in rows]
        assert np.mean(losses[-5:]) < np.mean(losses[:5])
        assert (tmp_path / "config.json").exists()

    def test_same_seed_same_result(
        self, small_model, sent_vocab, sent_task, review_pvp, few_examples
    ):
        a = finetune(small_model, review_pvp, few_examples, sent_task, sent_vocab, tiny_train_cfg())
        b = finetune(small_model, review_pvp, few_examples, sent_task, sent_vocab, tiny_train_cfg())
        for (_, pa), (_, pb) in zip(a.parameters(), b.parameters()):
            np.testing.assert_array_equal(pa.data, pb.data)

    def test_input_model_not_mutated(
        self, small_model, sent_vocab, sent_task, review_pvp, few_examples
    ):
        before = [p.data.copy() for _, p in small_model.parameters()]
        finetune(small_model, review_pvp, few_examples, sent_task, sent_vocab, tiny_train_cfg())
        for (_, p), b in zip(small_model.parameters(), before):
            np.testing.assert_array_equal(p.data, b)

    def test_empty_train_set_rejected(self, small_model, sent_vocab, sent_task, review_pvp):
        with pytest.raises(ValueError):
            finetune(small_model, review_pvp, [], sent_task, sent_vocab, tiny_train_cfg())

    def test_unlabeled_examples_rejected(self, small_model, sent_vocab, sent_task, review_pvp):
        examples = [Example("e", {"text": "great pizza !"}, label=None)]
        with pytest.raises(ValueError):
            finetune(small_model, review_pvp, examples, sent_task, sent_vocab, tiny_train_cfg())

    def test_non_finite_loss_aborts(
        self, small_model, sent_vocab, sent_task, review_pvp, few_examples
    ):
        broken = small_model.clone()
        broken.token_emb.data[:] = np.nan
        with pytest.raises(TrainingDivergedError):
            finetune(broken, review_pvp, few_examples, sent_task, sent_vocab, tiny_train_cfg())


class TestAugmentations:
    def test_swap_fields_preserves_label(self, sent_vocab):
        from clozefew import rng as rng_mod
        from clozefew.training import _augmented

        aug = Augmentations(swap_fields=("a", "b"))
        x = Example("e", {"a": "left", "b": "right"}, label=1)
        seen = set()
        for i in range(20):
            out, targets = _augmented(x, aug, None, sent_vocab, rng_mod.stream(3, "t", i))
            assert out.label == 1
            assert targets is None
            seen.add(out.fields["a"])
        assert seen == {"left", "right"}

    def test_free_form_targets_padded(self, sent_vocab, sent_task, review_pvp):
        from clozefew import rng as rng_mod
        from clozefew.training import _augmented

        aug = Augmentations(free_form=True)
        x = Example("e", {"text": "cold tea"}, label=0)
        lengths = set()
        for i in range(40):
            out, targets = _augmented(x, aug, review_pvp, sent_vocab, rng_mod.stream(5, "t", i))
            assert out.label == 0
            base = review_pvp.verbalizer.tokens(0)
            extra = len(targets) - len(base)
            assert targets[: len(base)] == base
            assert all(t == sent_vocab.pad_id for t in targets[len(base):])
            assert 0 <= extra <= 3
            lengths.add(extra)
        assert lengths == {0, 1, 2, 3}


class TestPretrain:
    def test_mlm_pretraining_reduces_masked_loss(self, small_model, sent_vocab):
        from clozefew.data import make_toy_corpus

        corpus = make_toy_corpus("sentiment", 120, seed=2)
        cfg = tiny_train_cfg(max_steps=40, batch_size=4, gradient_accumulation_steps=1)
        trained = pretrain_mlm(small_model, corpus, sent_vocab, cfg)

        from clozefew.training import mlm_loss_graph
        from clozefew.vocab import tokenize

        def avg_loss(model):
            total = 0.0
            for line in corpus[:20]:
                ids = list(tokenize(sent_vocab, line).ids)
                masked = list(ids)
                masked[1] = sent_vocab.mask_id
                total += mlm_loss_graph(model, masked, [1], [ids[1]]).item()
            return total / 20

        assert avg_loss(trained) < avg_loss(small_model)

    def test_empty_corpus_rejected(self, small_model, sent_vocab):
        with pytest.raises(ValueError):
            pretrain_mlm(small_model, [], sent_vocab, tiny_train_cfg())
