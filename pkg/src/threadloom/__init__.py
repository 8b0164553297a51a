"""Perplexity-based conversation disentanglement with prioritised responses."""

__version__ = "0.1.0"

from .corpus import AssignmentRecord, Corpus, Decision, Message, load_corpus
from .disentangle import DetectionConfig, Thread, ThreadStore, assign_message, calibrate_threshold, detect_stream
from .evalharness import ClusteringMetrics, LatencyReport, latency_compare, one_to_one_accuracy, pairwise_f1
from .interleave import InterleaveConfig, TrainingPair, build_dataset, format_training_pair
from .lm_core import NgramModel, NgramScorer, PerplexityScore, perplexity, tokenize, train_ngram
from .pipeline import PipelineConfig, PipelineState, process_message, respond_next, run_batch
from .priority import PriorityQueue, WeightTable
from .remote_lm import EndpointConfig, RemoteScorer, remote_generate, remote_perplexity
from .topic import TopicConfig, extract_topic, nmf_factorize

__all__ = [
    "AssignmentRecord", "ClusteringMetrics", "Corpus", "Decision", "DetectionConfig", "EndpointConfig",
    "InterleaveConfig", "LatencyReport", "Message", "NgramModel", "NgramScorer", "PerplexityScore",
    "PipelineConfig", "PipelineState", "PriorityQueue", "RemoteScorer", "Thread", "ThreadStore",
    "TopicConfig", "TrainingPair", "WeightTable", "assign_message", "build_dataset", "calibrate_threshold",
    "detect_stream", "extract_topic", "format_training_pair", "latency_compare", "load_corpus",
    "nmf_factorize", "one_to_one_accuracy", "pairwise_f1", "perplexity", "process_message",
    "remote_generate", "remote_perplexity", "respond_next", "run_batch", "tokenize", "train_ngram",
]
