"""Universal adversarial mesh attacks on a cascaded camera-LiDAR 3D car
detector: differentiable LiDAR and RGB mesh renderers, hand-derived adjoint
gradients, a desk-scale victim model, and rotated-box AP evaluation."""

from .boxes import Box2D, Box3D
from .geometry import (
    RigidTransform,
    TriMesh,
    apply_deformation,
    clamp_extents,
    laplacian_deltas,
    laplacian_loss,
    make_icosphere,
    roof_pose,
)
from .diffcore import AdamState, ParamBlock, adam_step, finite_diff_check
from .lidar import (
    HitRecord,
    LidarConfig,
    Ray,
    generate_rays,
    lidar_backward,
    merge_into_scene,
    moller_trumbore,
    render_lidar,
)
from .raster import CameraModel, CoverageMap, color_backward, project, rasterize
from .metrics import (
    APReport,
    Detection,
    EvalConfig,
    GtBox,
    attack_delta,
    average_precision,
    iou_3d,
    iou_bev,
)
from .dataio import (
    Scene,
    SynthConfig,
    gen_synthetic,
    place_meshes,
    read_kitti_scene,
)
from .victim import (
    Frustum,
    Scorer2D,
    SegNet,
    TrainedVictim,
    estimate_box,
    extract_frustum,
    propose_2d,
    segment,
    train_victim,
)
from .attack import (
    AttackConfig,
    AttackParams,
    LossReport,
    car_prob,
    image_loss,
    l_mesh,
    pc_loss,
    run_attack,
)

__version__ = "0.1.0"
