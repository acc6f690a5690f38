"""Sparse-measurement image reconstruction with prior-embedded coordinate networks."""

from .images import ImageGrid
from .metrics import psnr, ssim
from .mlp import (
    AdamState,
    FourierEncoding,
    MlpParams,
    OptimizerError,
    adam_init,
    adam_step,
    fourier_features,
    init_params,
    make_fourier_encoding,
    mlp_backward,
    mlp_forward,
)
from .operators import (
    KSpaceData,
    NudftOperator,
    RadonTransform,
    SamplingSpec,
    SinogramData,
    fbp_reconstruct,
    golden_angle_spokes,
    load_kspace,
    load_sinogram,
    nudft_adjoint,
    nudft_forward,
    radon_adjoint,
    radon_forward,
    ramp_density_weights,
    sample_kspace,
    save_kspace,
    save_sinogram,
)
from .phantoms import LesionSpec, load_image, perturb_lesion, save_image, shepp_logan
from .pipeline import (
    CoordinateNetwork,
    ForwardModel,
    ReconConfig,
    embed_prior,
    forward_model_for,
    infer_image,
    load_checkpoint,
    make_coordinate_grid,
    reconstruct,
    save_checkpoint,
    train_reconstruction,
)

__version__ = "0.1.0"
