"""Sequential recommendation with discrete diffusion over semantic item IDs."""

__version__ = "0.1.0"

from . import corpus, diffusion, evaluator, inference, model, tokenizer, trainer  # noqa: F401
from .kernels import backend as kernel_backend  # noqa: F401
