"""voxelformer: hierarchical windowed-attention 3D segmentation at desk scale.

The package is self-contained: a numpy-backed tensor core with reverse-mode
differentiation, the full encoder/decoder architecture built on it, losses,
an AdamW trainer, and a CLI harness for synthetic-volume experiments.

Submodules are imported lazily so that `import voxelformer` stays light and
the CLI can pin threading environment variables before numpy loads.
"""

import importlib

__version__ = "0.1.0"

_EXPORTS = {
    "Tensor": "tensor",
    "Parameter": "tensor",
    "no_grad": "tensor",
    "ModelConfig": "model",
    "SegOutput": "model",
    "VoxelFormer": "model",
    "build_model": "model",
    "count_params": "model",
    "analytic_param_count": "model",
    "estimate_flops": "model",
}

__all__ = sorted(_EXPORTS) + ["__version__"]


def __getattr__(name):
    if name in _EXPORTS:
        module = importlib.import_module(f".{_EXPORTS[name]}", __name__)
        value = getattr(module, name)
        globals()[name] = value
        return value
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return __all__
