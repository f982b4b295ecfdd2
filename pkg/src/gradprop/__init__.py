"""Value-gradient backpropagation on deviator-actor-critic networks."""
import os as _os

# Cap BLAS threads before numpy loads; GRADPROP_THREADS also bounds replica workers.
_threads = _os.environ.get("GRADPROP_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    _os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
