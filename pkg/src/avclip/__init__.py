"""Contrastive audio-video alignment over frozen encoder embeddings, plus a CVAE goal prior."""

from .clip_align import ClipAlignModel, TrainConfig, clip_loss, project_audio, project_video, train_clip
from .embedding_store import EmbeddingMatrix, PairedDataset, PairManifest, read_embeddings, write_embeddings
from .goal_prior import CvaePrior, PriorConfig, map_audio_to_goal, sample_goal, train_prior
from .synthetic_bench import SyntheticSpec, generate
from .windowing import WindowSpec, compute_windows

__version__ = "0.1.0"
