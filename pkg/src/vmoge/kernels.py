"""Backend selection for the hot kernels.

The compiled extension is used when it was built; otherwise the numpy
fallback. ``VMOGE_KERNELS=python`` forces the fallback and
``VMOGE_KERNELS=c`` makes a missing extension an import error.
"""
import os

from . import _kernels_py

_choice = os.environ.get("VMOGE_KERNELS", "auto").lower()

if _choice == "python":
    impl = _kernels_py
else:
    try:
        from . import _ckernels as impl
    except ImportError:
        if _choice == "c":
            raise
        impl = _kernels_py

BACKEND = impl.BACKEND

conv1d_forward = impl.conv1d_forward
conv1d_backward = impl.conv1d_backward
maxpool2_forward = impl.maxpool2_forward
maxpool2_backward = impl.maxpool2_backward
layernorm_forward = impl.layernorm_forward
layernorm_backward = impl.layernorm_backward
mha_forward = impl.mha_forward
mha_backward = impl.mha_backward
conv_out_len = _kernels_py.conv_out_len
