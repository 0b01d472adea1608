"""Conditional bijective reshaping of frozen image-caption embeddings for retrieval."""

from todnet.core_types import (
    Condition,
    DeformerKind,
    EmbeddingDataset,
    EmbeddingRecord,
    Modality,
    Split,
    cosine_similarity,
    l2_normalize,
)
from todnet.flow import (
    CouplingLayerParams,
    FlowParams,
    Half,
    MlpParams,
    coupling_forward,
    coupling_inverse,
    deformed_similarity,
    flow_backward,
    flow_forward,
    flow_inverse,
    init_flow,
    init_mlp_deformer,
    mlp_deformer_forward,
    mlp_forward,
)

__version__ = "0.1.0"
