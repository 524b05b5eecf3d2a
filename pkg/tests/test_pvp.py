import pytest

from clozefew.pvp import (
    PVP,
    Example,
    Pattern,
    PatternError,
    TaskSpec,
    UnfittablePatternError,
    Verbalizer,
    VerbalizerError,
    apply_pattern,
    classifier_input,
    load_bundle,
    max_verbalization_len,
    save_bundle,
)
from clozefew.vocab import SPECIAL_TOKENS, Vocabulary, tokenize


def toks(vocab, seq):
    return [vocab.token_of(i) for i in seq.ids]


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


class TestPatternParse:
    def test_segments(self):
        p = Pattern.parse("{a} or {b} ? [MASK] . || {a}", "p")
        kinds = [s[0] for s in p.segments]
        assert kinds == ["field", "literal", "field", "literal", "mask", "literal", "boundary", "literal", "field"]
        assert p.field_names == ("a", "b", "a")

    def test_exactly_one_mask(self):
        with pytest.raises(PatternError):
            Pattern.parse("{a} no mask here", "p")
        with pytest.raises(PatternError):
            Pattern.parse("{a} [MASK] [MASK]", "p")

    def test_render_round_trip(self):
        text = "{a} or {b} ? [MASK] . || {a}"
        assert Pattern.parse(Pattern.parse(text, "p").render(), "p").render() == Pattern.parse(text, "p").render()


class TestApplyPattern:
    def test_two_mask_expansion(self, sent_vocab, sent_task, review_pvp):
        x = Example("e", {"text": "Awful pizza!"}, label=0)
        z = apply_pattern(review_pvp, x, 2, 256, sent_vocab)
        assert toks(sent_vocab, z) == ["awful", "pizza", "!", ".", "it", "was", "[MASK]", "[MASK]", "."]
        assert z.mask_positions == (6, 7)

    def test_single_mask(self, sent_vocab, sent_task, review_pvp):
        x = Example("e", {"text": "great soup ."}, label=1)
        z = apply_pattern(review_pvp, x, 1, 256, sent_vocab)
        assert z.num_masks == 1

    def test_longest_first_truncation_balances_fields(self):
        vocab = Vocabulary(SPECIAL_TOKENS + ("w", "q", "[SEP]".lower(), "?"))
        task = TaskSpec("t", ("no", "yes"), ("a", "b"))
        pattern = Pattern.parse("{a} ? {b} [MASK]", "p")
        verbalizer = Verbalizer("v", {0: (vocab.id_of("w"),), 1: (vocab.id_of("q"),)})
        pvp = PVP(pattern, verbalizer, "p")
        x = Example("e", {"a": " ".join(["w"] * 300), "b": " ".join(["q"] * 300)}, label=0)
        z = apply_pattern(pvp, x, 1, 256, vocab)
        assert len(z) == 256
        a_count = sum(1 for i in z.ids if vocab.token_of(i) == "w")
        b_count = sum(1 for i in z.ids if vocab.token_of(i) == "q")
        # independent simulation of the longest-first removal loop
        lens = {"a": 300, "b": 300}
        budget = 256 - 2  # one literal token, one mask
        while sum(lens.values()) > budget:
            longest = max(lens, key=lambda k: lens[k])
            lens[longest] -= 1
        assert (a_count, b_count) == (lens["a"], lens["b"])
        assert abs(a_count - b_count) <= 1

    def test_truncation_spares_literals(self, sent_vocab, sent_task, review_pvp):
        x = Example("e", {"text": " ".join(["pizza"] * 50)}, label=1)
        z = apply_pattern(review_pvp, x, 2, 20, sent_vocab)
        tail = toks(sent_vocab, z)[-5:]
        assert tail == ["it", "was", "[MASK]", "[MASK]", "."]
        assert len(z) == 20

    def test_monotone_in_max_seq_length(self, sent_vocab, sent_task, review_pvp):
        x = Example("e", {"text": " ".join(["pizza"] * 60)}, label=1)
        sizes = [
            len(apply_pattern(review_pvp, x, 1, limit, sent_vocab))
            for limit in (16, 24, 40, 80)
        ]
        assert sizes == sorted(sizes)

    def test_unfittable(self, sent_vocab, sent_task, review_pvp):
        x = Example("e", {"text": "pizza"}, label=1)
        with pytest.raises(UnfittablePatternError):
            apply_pattern(review_pvp, x, 10, 8, sent_vocab)

    def test_missing_field(self, sent_vocab, review_pvp):
        x = Example("e", {"body": "pizza"}, label=1)
        with pytest.raises(PatternError):
            apply_pattern(review_pvp, x, 1, 64, sent_vocab)

    def test_mask_count_precondition(self, sent_vocab, review_pvp):
        x = Example("e", {"text": "pizza"}, label=1)
        with pytest.raises(ValueError):
            apply_pattern(review_pvp, x, 0, 64, sent_vocab)


class TestMaxVerbalizationLen:
    def test_mixed_lengths(self, sent_task, review_pvp):
        x = Example("e", {"text": "ok"}, label=0)
        assert max_verbalization_len(review_pvp, x, sent_task) == 2

    def test_all_single(self, sent_vocab, sent_task):
        verbalizer = Verbalizer.from_surface(
            "v", {"positive": "great", "negative": "awful"}, sent_task, sent_vocab
        )
        pvp = PVP(Pattern.parse("{text} [MASK]", "p"), verbalizer, "p")
        x = Example("e", {"text": "ok"}, label=0)
        assert max_verbalization_len(pvp, x, sent_task) == 1

    def test_singleton_candidates(self, sent_vocab, sent_task):
        verbalizer = Verbalizer.from_surface(
            "v", {"positive": "great", "negative": "awful bitter cold"}, sent_task, sent_vocab
        )
        pvp = PVP(Pattern.parse("{text} [MASK]", "p"), verbalizer, "p")
        x = Example("e", {"text": "ok"}, label=0, candidates=(0,))
        assert max_verbalization_len(pvp, x, sent_task) == 3

    def test_unmapped_candidate_is_config_error(self, sent_vocab, sent_task, review_pvp):
        pvp = PVP(review_pvp.pattern, Verbalizer("v", {1: review_pvp.verbalizer.tokens(1)}), "p")
        x = Example("e", {"text": "ok"}, label=0)
        with pytest.raises(VerbalizerError):
            max_verbalization_len(pvp, x, sent_task)


class TestVerbalizer:
    def test_rejects_empty_sequence(self, sent_vocab):
        with pytest.raises(VerbalizerError):
            Verbalizer("v", {0: ()}).validate(sent_vocab)

    def test_rejects_special_ids(self, sent_vocab):
        with pytest.raises(VerbalizerError):
            Verbalizer("v", {0: (sent_vocab.mask_id,)}).validate(sent_vocab)
        with pytest.raises(VerbalizerError):
            Verbalizer("v", {0: (sent_vocab.pad_id,)}).validate(sent_vocab)
        with pytest.raises(VerbalizerError):
            Verbalizer("v", {0: (sent_vocab.unk_id,)}).validate(sent_vocab)

    def test_rejects_shared_verbalization(self, sent_vocab):
        great = sent_vocab.id_of("great")
        with pytest.raises(VerbalizerError):
            Verbalizer("v", {0: (great,), 1: (great,)}).validate(sent_vocab)

    def test_surface_tokenization(self, sent_vocab, sent_bundle):
        verbalizer = Verbalizer.from_surface(
            "default", {"positive": "great", "negative": "terrible"}, sent_bundle.task, sent_vocab
        )
        assert len(verbalizer.tokens(1)) == 1
        assert [sent_vocab.token_of(i) for i in verbalizer.tokens(0)] == ["terri", "·ble"]


class TestExample:
    def test_label_must_be_candidate(self):
        with pytest.raises(ValueError):
            Example("e", {"text": "x"}, label=2, candidates=(0, 1))

    def test_fields_nonempty(self):
        with pytest.raises(ValueError):
            Example("e", {}, label=0)


class TestBundleIO:
    def test_round_trip(self, tmp_path, sent_bundle, sent_vocab):
        save_bundle(tmp_path, sent_bundle)
        loaded = load_bundle(tmp_path)
        assert loaded.task == sent_bundle.task
        assert [p.render() for p in loaded.patterns] == [p.render() for p in sent_bundle.patterns]
        assert [p.name for p in loaded.pvps(sent_vocab)] == [p.name for p in sent_bundle.pvps(sent_vocab)]

    def test_multiple_verbalizers_cross_product(self, tmp_path, sent_bundle, sent_vocab):
        from clozefew.pvp import TaskBundle

        bundle = TaskBundle(
            sent_bundle.task,
            sent_bundle.patterns,
            {
                "v1": {"positive": "great", "negative": "terrible"},
                "v2": {"positive": "fine", "negative": "awful"},
            },
        )
        pvps = bundle.pvps(sent_vocab)
        assert len(pvps) == len(sent_bundle.patterns) * 2
        assert all("+" in p.name for p in pvps)


class TestClassifierInput:
    def test_joins_fields_with_boundary(self, sent_vocab):
        task = TaskSpec("t", ("no", "yes"), ("premise", "hypothesis"))
        x = Example("e", {"premise": "great pizza", "hypothesis": "awful soup"}, label=0)
        z = classifier_input(x, task, sent_vocab, 64)
        assert toks(sent_vocab, z) == ["great", "pizza", "|", "awful", "soup"]

    def test_truncates_to_budget(self, sent_vocab):
        task = TaskSpec("t", ("no", "yes"), ("a", "b"))
        x = Example("e", {"a": " ".join(["pizza"] * 40), "b": " ".join(["soup"] * 40)}, label=0)
        z = classifier_input(x, task, sent_vocab, 31)
        assert len(z) == 31
