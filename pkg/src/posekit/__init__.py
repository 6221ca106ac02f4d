"""posekit: find and analyze classifier-fooling 6D object poses.

Renders textured meshes under parameterized pose and lighting, drives
black-box classifiers through a newline-delimited JSON protocol, and searches
pose space with random search, depth-constrained random search and
finite-difference gradient descent.
"""

from .geometry import (
    FrustumSpec,
    Mesh,
    PoseParams,
    TransformChain,
    TrigPose,
    apply_pose,
    clamp_pose,
    compose_chain,
    decode_trig,
    encode_trig,
    frustum_bound,
    load_obj,
    rotation_matrix_axis_angle,
)
from .renderer import (
    LightingConfig,
    RenderOutput,
    SceneConfig,
    bbox_area,
    lighting_preset,
    project_point,
    render,
)
from .classifier import (
    ClassifierResponse,
    ExternalBackend,
    PoseRegion,
    SyntheticBackend,
    cross_entropy,
)
from .search import (
    SearchConfig,
    TrialRecord,
    central_difference,
    fd_gradient,
    run_fdg,
    run_multiview_fdg,
    run_random_search,
    run_zrs,
    sample_random_pose,
)

__version__ = "0.1.0"
