"""Layout alignment of multi-object 3D scenes against a reference image by
differentiable rasterization, an optimal-transport appearance loss, and a
grid-statistics semantic loss."""

from .scene import (
    Camera,
    HyperParams,
    LayoutGradient,
    LayoutParams,
    Mesh,
    MeshError,
    Scene,
    SceneError,
    SceneObject,
    load_mesh,
    load_scene,
    save_mesh,
    save_scene,
    transform_jacobian,
    transform_point,
)
from .raster import (
    GBuffer,
    PixelJacobians,
    RasterError,
    interior_gradients,
    project,
    rasterize,
    shading_point_position,
)
from .ot import (
    Assignment,
    CostMatrix,
    TransportError,
    TransportPlan,
    appearance_grad,
    appearance_loss,
    build_cost_matrix,
    extract_assignment,
    hungarian_oracle,
    sinkhorn,
)
from .semantic import (
    FeatureMap,
    GridStatExtractor,
    SemanticError,
    extract_features_gridstat,
    load_features,
    save_features,
    semantic_grad,
    semantic_loss,
)
from .optimizer import (
    AdamState,
    AlignAbort,
    AlignConfig,
    AlignTrace,
    adam_step,
    align,
    loss_eval,
    total_loss,
)
from .metrics import MetricReport, metric_report, psnr, ssim

__version__ = "0.1.0"
