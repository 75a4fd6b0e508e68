"""Geometry-aware prototype discovery for interpretable RL policies.

Stage 1 trains a small mapping with a joint proxy-anchor and manifold
objective and extracts real-instance prototypes; stage 2 wraps a
decomposed black-box policy with a prototype-similarity head.
"""

from .dataset import (
    ActionLayout,
    EncodedDataset,
    PolicyDecomposition,
    collect_rollout,
    discretize_action,
    load_dataset,
    save_dataset,
)
from .discover import (
    PrototypeEntry,
    PrototypeSet,
    Stage1Config,
    TrainedState,
    extract_prototypes,
    momentum_update,
    train_stage1,
)
from .embednet import (
    LossBreakdown,
    MappingNet,
    ProxyBank,
    forward,
    forward_batch,
    manifold_loss,
    pa_loss,
    total_loss,
)
from .envlab import (
    BlackBoxPolicy,
    CEMConfig,
    canonical_prototypes,
    cartpole_env,
    class_mean_prototypes,
    kmeans_prototypes,
    make_env,
    pointmass_env,
    train_blackbox,
)
from .errors import (
    ConfigError,
    ContractError,
    DegenerateBatch,
    DegenerateNeighborhood,
    FormatError,
    NumericalError,
    ProtoscopeError,
    ShapeError,
    TrainingFailed,
)
from .manifold import (
    Chart,
    ChartSet,
    SimilarityParams,
    build_charts,
    pairwise_similarity,
    reconstruction_quality,
    similarity,
)
from .numkit import (
    MomentOptimizer,
    OrthonormalBasis,
    ProjectionResult,
    opt_step,
    principal_basis,
    project_onto,
)
from .pwnet import (
    PWNetHead,
    RewardStats,
    Stage2Config,
    build_head,
    evaluate,
    explain,
    sim,
    train_stage2,
    wrap_forward,
)
from .synthfix import PlaneTruth, make_planes_fixture

__version__ = "0.1.0"
