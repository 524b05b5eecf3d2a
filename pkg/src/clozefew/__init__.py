"""Few-shot text classification via cloze patterns over masked LMs.

The package turns classification examples into fill-in-the-blank questions
through user-authored patterns and verbalizers, scores labels with a
masked LM (single- or multi-token, three decoding orders), finetunes a
tiny self-contained transformer backend with hinge or cross-entropy
losses, combines pattern ensembles into soft labels, distills them into a
plain classifier, and optionally iterates generations of self-training on
growing pseudo-labeled datasets.
"""

from .data import (
    Dataset,
    MetricReport,
    build_unlabeled,
    evaluate,
    make_few_shot_splits,
    make_toy_task,
    make_toy_vocab,
    sample_few_shot,
    toy_bundle,
)
from .mlm import (
    Classifier,
    ClassifierHead,
    MaskLogits,
    TabularBackend,
    TinyTransformer,
    TinyTransformerConfig,
    forward_classify,
    forward_masked,
    load_checkpoint,
    save_checkpoint,
)
from .pipeline import (
    EnsembleMember,
    GenerationPlan,
    PetResult,
    PetSettings,
    SoftDataset,
    distill,
    ensemble_soft_label,
    run_ipet,
    run_pet,
    zero_shot_weight,
)
from .pvp import PVP, Example, Pattern, TaskSpec, Verbalizer, apply_pattern, max_verbalization_len
from .scoring import (
    DecodingStrategy,
    ScoreTable,
    decode_sequence_prob,
    free_form_decode,
    score_multi_token,
    score_parallel_training,
    score_single_token,
)
from .training import (
    Augmentations,
    TrainConfig,
    cross_entropy_pvp_loss,
    distill_loss,
    finetune,
    hinge_loss,
    pretrain_mlm,
)
from .vocab import TokenSequence, Vocabulary, build_vocab, detokenize, tokenize

__version__ = "0.1.0"

__all__ = [
    "Augmentations",
    "Classifier",
    "ClassifierHead",
    "Dataset",
    "DecodingStrategy",
    "EnsembleMember",
    "Example",
    "GenerationPlan",
    "MaskLogits",
    "MetricReport",
    "PVP",
    "Pattern",
    "PetResult",
    "PetSettings",
    "ScoreTable",
    "SoftDataset",
    "TabularBackend",
    "TaskSpec",
    "TinyTransformer",
    "TinyTransformerConfig",
    "TokenSequence",
    "TrainConfig",
    "Verbalizer",
    "Vocabulary",
    "apply_pattern",
    "build_unlabeled",
    "build_vocab",
    "cross_entropy_pvp_loss",
    "decode_sequence_prob",
    "detokenize",
    "distill",
    "distill_loss",
    "ensemble_soft_label",
    "evaluate",
    "finetune",
    "forward_classify",
    "forward_masked",
    "free_form_decode",
    "hinge_loss",
    "load_checkpoint",
    "make_few_shot_splits",
    "make_toy_task",
    "make_toy_vocab",
    "max_verbalization_len",
    "pretrain_mlm",
    "run_ipet",
    "run_pet",
    "sample_few_shot",
    "save_checkpoint",
    "score_multi_token",
    "score_parallel_training",
    "score_single_token",
    "tokenize",
    "toy_bundle",
    "zero_shot_weight",
]
