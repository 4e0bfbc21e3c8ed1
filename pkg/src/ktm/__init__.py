"""K-token merging: compress every K token embeddings into one latent slot."""

from .data import Tokenizer, gen_tree, gen_tree_dataset, label_oracle, load_jsonl
from .encoder import KGramCache, MergeEncoder, compress_prefix, encoder_forward, partition_and_pad
from .infer import GenerationConfig, MixedSequence, classify, generate, prefill
from .model import ModelConfig, attach_lora, embed_tokens, forward_lm, init_params, trainable_parameters
from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = [
    "GenerationConfig", "KGramCache", "MergeEncoder", "MixedSequence", "ModelConfig", "Tensor",
    "Tokenizer", "attach_lora", "classify", "compress_prefix", "embed_tokens", "encoder_forward",
    "forward_lm", "gen_tree", "gen_tree_dataset", "generate", "init_params", "label_oracle",
    "load_jsonl", "no_grad", "partition_and_pad", "prefill", "trainable_parameters",
]
