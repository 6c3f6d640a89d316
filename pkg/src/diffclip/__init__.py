"""CLIP-style dual encoder with differential attention, built on a small
float64 reverse-mode autodiff engine."""

from .attention import (AttentionConfig, AttentionWeights, LambdaParams, compute_lambda,
                        diff_attention_head, diff_mha, lambda_init_schedule, standard_mha)
from .encoders import (EncoderConfig, ModelWeights, build_model, encode_image, encode_text,
                       patchify)
from .objective import SimilarityMatrix, clip_loss, similarity_matrix
from .tensor import Tape, Tensor

__version__ = "0.1.0"
