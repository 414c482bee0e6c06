"""Decode-time accumulated attention intervention on a toy KV-cache transformer."""

from tarac.attention_math import (
    ImageSpan,
    causal_attention_row,
    image_mass,
    reduce_heads,
    renormalize_last_row,
    softmax_row,
)
from tarac.model import (
    KvCache,
    ModelConfig,
    Weights,
    forward_full,
    forward_token,
    init_weights,
    load_weights,
    prefill,
    save_weights,
)
from tarac.intervention import (
    AccumulatedAttention,
    TaracConfig,
    TaracHook,
    apply_layer_intervention,
    capture_image_attention,
    inject_accumulated,
    reset,
    update_accumulated,
)
from tarac.decoding import (
    GenerationResult,
    SequenceLayout,
    build_prompt,
    compare_runs,
    generate,
    greedy_pick,
)

__all__ = [
    "AccumulatedAttention",
    "GenerationResult",
    "ImageSpan",
    "KvCache",
    "ModelConfig",
    "SequenceLayout",
    "TaracConfig",
    "TaracHook",
    "Weights",
    "apply_layer_intervention",
    "build_prompt",
    "capture_image_attention",
    "causal_attention_row",
    "compare_runs",
    "forward_full",
    "forward_token",
    "generate",
    "greedy_pick",
    "image_mass",
    "init_weights",
    "inject_accumulated",
    "load_weights",
    "prefill",
    "reduce_heads",
    "renormalize_last_row",
    "reset",
    "save_weights",
    "softmax_row",
    "update_accumulated",
]
