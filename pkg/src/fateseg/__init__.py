"""Training-free few-shot 3D segmentation by support retrieval, memory attention and bidirectional propagation."""

__version__ = "0.1.0"

from .attention import AttentionWeights, cross_attention, memory_attention, self_attention
from .decoder import DecoderSpec, SliceMask, decode
from .encoder import EmbeddingMap, EncoderSpec, encode, resize_slice
from .evaluation import dice, run_ablation, split_support_test
from .memory import downsample_mask, encode_memory, fuse_memories
from .phantom import PhantomObject, PhantomSpec, default_spec, make_dataset, make_phantom
from .pipeline import PipelineConfig, initial_slice_index, segment_object, segment_volume
from .retrieval import SimilarityMetric, build_library, retrieve_top_j, similarity
from .volume import LabelVolume, SliceAxis, Volume, extract_slice, load_volume, save_volume

__all__ = [
    "AttentionWeights", "DecoderSpec", "EmbeddingMap", "EncoderSpec", "LabelVolume", "PhantomObject",
    "PhantomSpec", "PipelineConfig", "SimilarityMetric", "SliceAxis", "SliceMask", "Volume",
    "build_library", "cross_attention", "decode", "default_spec", "dice", "downsample_mask", "encode", "encode_memory",
    "extract_slice", "fuse_memories", "initial_slice_index", "load_volume", "make_dataset", "make_phantom",
    "memory_attention", "resize_slice", "retrieve_top_j", "run_ablation", "save_volume", "segment_object",
    "segment_volume", "self_attention", "similarity", "split_support_test",
]
