"""gendet: a desk-scale generative object detector.

Detects objects and generates their category names in one pass: a patch
featurizer and encoder feed a region-language decoder whose text slots are
decoded non-autoregressively through per-region token DAGs. Training is
class-agnostic set prediction with Hungarian matching; evaluation follows
the open-ended protocol (similarity-rescaled scores, COCO-style AP).
"""

from .dag_head import (
    NamePrediction,
    TokenDAG,
    build_dag,
    build_dags,
    dag_nll,
    greedy_decode,
    viterbi_decode,
)
from .evaluation import (
    Detection,
    EvalReport,
    compute_ap,
    dice_similarity,
    exact_name_rate,
    rescale_scores,
)
from .featurizer import FeatureMap, ModelConfig, encode, patch_embed, select_queries
from .model import Detector, ModelOutput
from .numcore import (
    CheckpointError,
    ConfigError,
    DiffArray,
    DimensionError,
    OptimState,
    adamw_step,
    init_optim_state,
    load_tensors,
    save_tensors,
)
from .objective import (
    LossWeights,
    MatchAssignment,
    giou,
    hungarian_match,
    matching_cost,
    total_loss,
)
from .rl_decoder import DecoderLayerParams, decoder_layer, init_text_state, run_decoder
from .synthdata import (
    DetectionSample,
    SceneConfig,
    Vocabulary,
    build_vocabulary,
    detokenize,
    generate_scene,
    read_dataset,
    tokenize,
    write_dataset,
)

__version__ = "0.1.0"
