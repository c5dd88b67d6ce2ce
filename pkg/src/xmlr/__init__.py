"""Late-fusion video corpus moment retrieval with convolutional start/end detection."""
from .encoder import ModelParams, encode_context, encode_corpus, encode_query, load_checkpoint, save_checkpoint
from .evalkit import EvalResult, recall_at_k, temporal_iou
from .featstore import ClipContext, CorpusManifest, QueryRecord, QueryType, read_store, synth_corpus, write_store
from .numkit import Rng
from .scorer import EncodedCorpus, MomentPrediction, RetrievalConfig, retrieve_batch, retrieve_corpus
from .trainkit import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "ClipContext", "CorpusManifest", "EncodedCorpus", "EvalResult", "ModelParams", "MomentPrediction",
    "QueryRecord", "QueryType", "RetrievalConfig", "Rng", "TrainConfig", "encode_context", "encode_corpus",
    "encode_query", "load_checkpoint", "read_store", "recall_at_k", "retrieve_batch", "retrieve_corpus",
    "save_checkpoint", "synth_corpus", "temporal_iou", "train", "write_store",
]
