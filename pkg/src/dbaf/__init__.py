"""Two-stage face de-identification: disentangle identity from attributes in
a latent pyramid, then anonymize it reversibly under a key."""

from .cid import CID, DisentangledCodes, disentangle, multi_head_attention, recombine, scaled_dot_product_attention
from .errors import ConfigurationError, DBAFError, NumericError, ShapeError, StateError, ValidationError
from .kria import KRIA, AnonKey, FiveWayCodes, build_five_way, generate_key, keyed_transform, load_key, save_key
from .latent_codec import BackboneConfig, LatentPyramid, ToyBackbone
from .maar import MAAR, channel_attention, enhance, spatial_attention
from .model import DBAF, Discriminator, ModelConfig, anonymize, recover
from .training import (Checkpoint, TrainConfig, load_checkpoint, run_ablation, save_checkpoint, train_stage1,
                       train_stage2)

__version__ = "0.1.0"
