"""Imagined-speech versus idle-state detection from EEG.

Synthetic sessions, windowing, CSP with LDA/SVM, three convolutional
networks on a small autodiff engine, metrics, streaming replay and t-SNE.
"""

from .config import PipelineConfig, config_hash, parse_config, serialize_config
from .csp import SpatialFilterBank, class_covariances, fit_csp, transform_logvar
from .dataio import Event, EventList, Recording, SynthConfig, generate_synthetic_session, load_session, save_session
from .deepnets import ArchitectureSpec, TrainHistory, build_architecture, train_network
from .evaluation import (
    ConfusionMatrix, MetricsReport, StreamTimeline, confusion, evaluate_model, metrics_from_confusion,
    stream_replay,
)
from .linear import LdaModel, SvmModel, fit_lda, fit_svm, predict_linear
from .models import (
    TrainedModel, fit_model, load_model, penultimate_features, predict, predict_proba, save_model,
)
from .preprocess import (
    ClassWeights, WindowPipeline, WindowSet, bandpass, class_weights, decimate, extract_labeled_windows,
    filtered_windows, split, standardize,
)
from .tsne import AffinityMatrix, EmbeddingResult, perplexity_affinities, tsne_optimize

__version__ = "0.1.0"
