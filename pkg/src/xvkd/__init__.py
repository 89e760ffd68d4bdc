"""Small-footprint speaker verification via multi-level x-vector distillation.

The toolkit trains a TDNN x-vector teacher, distills utterance-level,
frame-level bottleneck, aggregated, and concatenated composite embeddings
into compact fully-connected students with a frame-wise cosine loss, and
evaluates speaker-verification accuracy with a two-covariance PLDA backend
and EER/minDCF/DET metrics.
"""

from .autodiff import Parameter, Tensor, grad_check
from .config import ExperimentConfig, default_config, load_config
from .corpus import SyntheticCorpusSpec, TrialList, gen_corpus
from .distill import (
    DistillConfig,
    cosine_kd_loss,
    distill_student,
    frame_kd_loss,
    replicate_to_frames,
    student_embed,
)
from .embeddings import (
    AggregationSpec,
    EmbeddingKind,
    EmbeddingSequence,
    LdeLayer,
    SpeakerEmbedding,
    aggregate,
    compose,
    extract_frame_bn,
    extract_utterance,
    lde_encode,
)
from .features import CmnConfig, FeatureSequence, chunk, melspec, windowed_cmn
from .metrics import DcfParams, DetCurve, ScoreSet, compute_det, eer, min_dcf
from .models import (
    AamConfig,
    StudentModel,
    TeacherModel,
    aam_loss,
    attentive_stats_pool,
    count_params,
    student_forward,
    teacher_forward,
)
from .optim import Adam
from .pipeline import ExperimentReport, run_experiment, train_teacher
from .plda import (
    LabeledEmbeddingSet,
    PldaModel,
    center_normalize,
    cosine_score,
    plda_score,
    plda_train,
)
from .serialization import load_checkpoint, save_checkpoint

__version__ = "0.1.0"
