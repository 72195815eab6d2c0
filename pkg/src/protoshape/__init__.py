"""Prior-guided point cloud completion on a numpy autodiff core.

Submodules: ``tensor`` (autodiff), ``geometry`` (gridding, FPS, partial
views), ``pretext`` (shape classifier, prototypes, priors), ``completion``
(the completion network), ``losses`` (chamfer, projection, metrics),
``data`` (synthetic corpus) and ``harness``/``cli`` (experiments).
"""

from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
