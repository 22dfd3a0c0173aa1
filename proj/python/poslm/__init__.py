"""Position-token language modeling: grounded-text codecs, the ordering-aware
masked-reconstruction objective, masking strategies, box/recall metrics, and a
synthetic grounded-scene generator, backed by the C++ core."""

import os
import sys

try:
    from ._core import *  # noqa: F401,F403
    from . import _core
except ImportError:  # pragma: no cover - test-tree fallback
    # In-tree runs (ctest) point POSLM_CORE_DIR at the built extension.
    _dir = os.environ.get("POSLM_CORE_DIR")
    if not _dir:
        raise
    sys.path.insert(0, _dir)
    from _core import *  # noqa: F401,F403
    import _core

__all__ = [name for name in dir(_core) if not name.startswith("_")]
__version__ = "0.1.0"
