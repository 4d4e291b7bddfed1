"""Cooperative 3D object detection over object-level sparse features.

A fully sparse single-agent extractor turns point clouds into compact
per-object records (position + confidence + semantic feature vector);
a byte-accounted channel moves them between agents with configurable
latency; a temporal fusion stage re-bins, merges, and decodes them into
7-attribute boxes; and an evaluation harness scores the result with
rotated-box average precision and log2-byte communication cost.
"""

__version__ = "0.1.0"

from .boxes import DetectionBox, make_box, monte_carlo_iou, rotated_iou
from .comm import (
    Channel,
    CommPacket,
    FrameCost,
    Pose,
    dataset_ab,
    deserialize,
    serialize,
    transform_to_ego,
    transmission_cost,
)
from .errors import (
    ComparisonError,
    ContractViolation,
    GenerationError,
    PacketDecodeError,
    ScenarioFormatError,
)
from .extractor import (
    ExtractorConfig,
    MultiScaleFeatures,
    SemDB,
    extract,
    extract_multiscale,
    run_heads,
    select_and_refine,
    sparse_fpn,
)
from .fuser import (
    FuserConfig,
    RevoxResult,
    RteSpec,
    TemporalBuffer,
    apply_rte,
    decode,
    fuse,
    fuse_and_decode,
    re_voxelize,
    rte_vector,
)
from .grid import ConvKernel, PointCloud, SparseGrid, VoxelSpec, densify, sparsify, wrap_pi
from .metrics import (
    APResult,
    MatchResult,
    average_precision,
    cross_entropy,
    focal_loss,
    l1_loss,
    match_detections,
    total_loss,
)
from .runner import MetricsReport, RunConfig, compare, run
from .scenario import (
    AgentSpec,
    ObjectDef,
    Occluder,
    SceneParams,
    Scenario,
    ScenarioFrame,
    SensorSpec,
    generate_scenario,
    load_scenario,
    observed_object_ids,
    preset_params,
    save_scenario,
    shuffle_ego_iter,
)
from .sparse_ops import (
    CellStats,
    VoxelEncoder,
    index_upsample,
    point_stats,
    sparse_add,
    sparse_conv,
    subm_conv,
    subm_maxpool,
    voxelize,
)
