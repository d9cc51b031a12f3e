"""CTC forward-backward kernel selection.

The compiled extension is used when it imports; ``CTXST_PURE=1`` forces the
numpy fallback. Both expose ``forward_backward(log_probs, labels)`` returning
``(nll, grad)`` where ``grad`` is d nll / d log_probs.
"""

import os

from . import _ctc_py

BACKEND = "python"
forward_backward = _ctc_py.forward_backward

if os.environ.get("CTXST_PURE", "") not in ("1", "true", "yes"):
    try:
        from . import _ctc_ext
    except ImportError:
        pass
    else:
        forward_backward = _ctc_ext.forward_backward
        BACKEND = "cython"
