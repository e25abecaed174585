"""Image-to-image translation by transforming a style-based generator.

A base generator trained on one domain is fine-tuned (mapping network
frozen) to a target domain, optionally with its coarse blocks swapped back
from the base. Images are translated by inverting them under the source
model and re-rendering the recovered code with the target.
"""

from .checkpoint import load_checkpoint, save_checkpoint
from .generator import (
    GeneratorConfig,
    GeneratorModel,
    StylePlan,
    make_style_plan,
    map_latent,
    sample_z,
    synthesize,
)
from .latent import (
    InversionConfig,
    SemanticBasis,
    edit_latent,
    extract_affine,
    invert_constrained,
    project_w,
    semantic_basis,
)
from .metrics import default_metric, frechet_distance, perceptual_distance, ssim
from .pipeline import ModelRegistry, TranslationRequest, multidomain_translate, translate
from .surgery import TransformationRecipe, model_distance, swap_layers, transform
from .training import FREEZE_FC, FreezeSet, TrainConfig, finetune, train_base

__version__ = "0.1.0"
