"""Multi-modal next-location prediction built on a small numpy autodiff engine.

Most users start from :mod:`m3ob.pipeline` (stage functions) or the
``python -m m3ob`` command line.
"""

from .autodiff import Tensor, backward, finite_difference_check, no_grad
from .config import DEFAULTS, load_config, resolve
from .evaluation import acc_at_k, evaluate_split
from .model import M3ob, collate
from .training import contrastive_align, total_loss, train

__version__ = "0.1.0"

__all__ = [
    "DEFAULTS",
    "M3ob",
    "Tensor",
    "acc_at_k",
    "backward",
    "collate",
    "contrastive_align",
    "evaluate_split",
    "finite_difference_check",
    "load_config",
    "no_grad",
    "resolve",
    "total_loss",
    "train",
]
