"""cloudssm: correspondence-based statistical shape models from point clouds."""

from .corruption import CorruptionSpec, add_gaussian_noise, remove_region, subset_training
from .geometry import (
    Cohort,
    CohortShape,
    NormalizationParams,
    PointCloud,
    RigidTransform,
    TriangleMesh,
    denormalize,
    farthest_point_sample,
    icp_rigid_align,
    knn_indices,
    load_mesh,
    mesh_vertices_as_cloud,
    normalize_cohort,
    random_subsample,
)
from .losses import LossConfig, chamfer_distance, correspondence_loss, mapping_error
from .metrics import earth_movers_distance, point_to_face_distance
from .model import (
    AutoencoderModel,
    CorrespondenceModel,
    ModelConfig,
    build_model,
    load_checkpoint,
    save_checkpoint,
)
from .ssm_stats import (
    PCAModel,
    compactness,
    fit_pca,
    generalization,
    mean_shape,
    mode_walk,
    specificity,
)
from .synthetic import CohortSpec, generate_cohort
from .training import TrainConfig, infer, split_cohort, train

__version__ = "0.1.0"
