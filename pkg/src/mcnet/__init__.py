"""Mirror-complementary two-stream network for RGB-thermal salient object detection."""
from .backbone import BackboneConfig, SwinEncoder, get_preset
from .fusion import MCNet, ModelConfig, SaliencyOutput, build_model
from .labels import decouple, distance_transform
from .losses import total_loss
from .metrics import MetricsReport, evaluate_dataset

__version__ = "0.1.0"
