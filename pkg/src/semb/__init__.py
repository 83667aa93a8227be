"""Speaker embeddings trained with prototypical or triplet losses on a small numpy autodiff."""

__version__ = "0.1.0"

from .data import Dataset, DatasetManifest, generate_corpus, load_features, split_speakers, write_features
from .encoder import EncoderConfig, EncoderParams, FeatureSequence, encode, encode_batch, init_params
from .evaluation import EvalReport, TrialSet, eer, roc, same_different, si_task, sv_task
from .losses import DistanceKind, pnl_batch, tl_batch_naive, tl_batch_semihard
from .sampler import EpisodeSpec, sample_episode
from .trainer import LossKind, TrainConfig, checkpoint_load, checkpoint_save, train

__all__ = [
    "Dataset",
    "DatasetManifest",
    "DistanceKind",
    "EncoderConfig",
    "EncoderParams",
    "EpisodeSpec",
    "EvalReport",
    "FeatureSequence",
    "LossKind",
    "TrainConfig",
    "TrialSet",
    "checkpoint_load",
    "checkpoint_save",
    "eer",
    "encode",
    "encode_batch",
    "generate_corpus",
    "init_params",
    "load_features",
    "pnl_batch",
    "roc",
    "same_different",
    "sample_episode",
    "si_task",
    "split_speakers",
    "sv_task",
    "tl_batch_naive",
    "tl_batch_semihard",
    "train",
    "write_features",
]
