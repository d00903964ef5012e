"""CPU-only mini-framework for multi-pathway U-Net cascades.

Dense tensors are numpy float32 arrays in canonical (batch, channels,
height, width) layout; label maps are integer arrays. All randomness flows
from explicit 64-bit seeds through PCG64 sub-streams (see umc.rng).
"""

import os

# Cap BLAS intra-op threads before numpy is first imported so numeric
# results do not depend on the host's core count. Override with UMC_THREADS.
_threads = os.environ.get("UMC_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, _threads)
del _threads, _var

from . import ops as _ops  # noqa: E402,F401  (registers graph ops on import)

__version__ = "0.1.0"
