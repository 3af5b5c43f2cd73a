"""Joint semantic alignment and unsupervised landmark discovery, desk scale.

Two tasks supervise each other: a dense flow between semantically similar
images and a set of discovered landmark probability maps, tied together by
an uncertainty-weighted consistency loss and trained by alternating
optimization on procedurally generated image pairs.
"""

from .aligner import AlignmentOutput, alignment_prob_loss, anchor_loss
from .detector import (
    DetectorSpec,
    LandmarkMaps,
    concentration_loss,
    detection_loss,
    equivariance_loss,
    separation_loss,
    soft_argmax,
)
from .geometry import (
    AffineWarp,
    DenseGT,
    TPSWarp,
    backward_warp,
    compose_flows,
    eval_warp,
    make_grid,
    warp_to_flow,
)
from .metrics import pck, regress_landmarks
from .model import JointModel, ModelConfig, forward_pair
from .similarity import normalize_features, self_similarity, similarity_volume
from .trainer import (
    ALIGN_PHASE,
    DETECT_PHASE,
    TrainConfig,
    TrainState,
    init_state,
    joint_loss,
    load_checkpoint,
    pretrain,
    save_checkpoint,
    total_loss,
    train_joint,
)

__version__ = "0.1.0"
