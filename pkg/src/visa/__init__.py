"""View-invariant probabilistic slot attention on synthetic multi-view point clouds."""

__version__ = "0.1.0"

from .gmm import DiagGaussian, DiagGmm, convex_combine, gaussian_product, project_mean  # noqa: E402
from .matching import Permutation, align_to_base, hungarian  # noqa: E402
from .metrics import inv_smcc, mcc, smcc  # noqa: E402
from .pipeline import PipelineConfig, ViewInvariantSlotAttention, infer_dataset, infer_scene  # noqa: E402
from .psa import ProbabilisticSlotAttention, PsaConfig, SlotState  # noqa: E402
from .scenegen import Scene, SceneSpec, sample_dataset  # noqa: E402
from .view import Affine2D  # noqa: E402

__all__ = [
    "Affine2D", "DiagGaussian", "DiagGmm", "Permutation", "PipelineConfig", "ProbabilisticSlotAttention",
    "PsaConfig", "Scene", "SceneSpec", "SlotState", "ViewInvariantSlotAttention", "align_to_base",
    "convex_combine", "gaussian_product", "hungarian", "infer_dataset", "infer_scene", "inv_smcc", "mcc",
    "project_mean", "sample_dataset", "smcc",
]
