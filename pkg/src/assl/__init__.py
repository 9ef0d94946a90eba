"""Self-supervised pretraining of attention-augmented CNN backbones for roof-type classification."""

from .attention import CBAM, CbamSpec
from .backbones import BackboneSpec, FeatureExtractor, build_backbone
from .config import LinearEvalConfig, RunConfig
from .data import AugmentationSeed, AugmentRecipe, DatasetManifest, ImageRecord, RoofClass
from .optim import LARS, OptimConfig, ScheduleConfig, warmup_cosine_lr
from .ssl_methods import SslConfig, build_ssl_model

__version__ = "0.1.0"
