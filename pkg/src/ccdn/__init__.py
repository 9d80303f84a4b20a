"""Complex-domain speech enhancement with a mask path, a complex mapping path
and a closed-form compensation step, on a small numpy autodiff engine."""
from .blocks import CCDN, compensate, param_count
from .config import ModelConfig, RunConfig, load_config
from .dsp import StftConfig, istft, stft
from .losses import joint_loss, si_sdr
from .metrics import estoi, evaluate

__all__ = ["CCDN", "compensate", "param_count", "ModelConfig", "RunConfig", "load_config",
           "StftConfig", "istft", "stft", "joint_loss", "si_sdr", "estoi", "evaluate"]
__version__ = "0.1.0"
