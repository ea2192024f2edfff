"""HyperTransformer pansharpening: C++ core with a thin Python surface.

Cubes are float64 numpy arrays shaped (bands, height, width); a PAN image is
(1, height, width). Configurations and reports travel as plain dicts.
"""

import json

from . import _core
from ._core import (
    ContractError,
    DegenerateError,
    DimensionError,
    FormatError,
    HyperTransformer as _HyperTransformer,
    TrainingError,
    bicubic_resample,
    cc,
    ergas,
    load_cube,
    mae_per_band,
    psnr,
    rmse,
    sam,
    save_cube,
    source_hash,
    synth_dataset,
    synthesize_pan,
    walds_degrade,
)

__all__ = [
    "ContractError", "DegenerateError", "DimensionError", "FormatError", "TrainingError",
    "Model", "bicubic_resample", "cc", "ergas", "evaluate", "evaluate_bicubic", "load_checkpoint",
    "load_cube", "mae_per_band", "main", "metrics", "psnr", "rmse", "sam", "save_cube", "source_hash",
    "synth_dataset", "synthesize_pan", "train", "walds_degrade",
]


class Model:
    """A HyperTransformer instance; `config` is a ModelConfig dict (missing keys take defaults)."""

    def __init__(self, config=None, seed=0, _core_model=None):
        self._m = _core_model if _core_model is not None else _HyperTransformer(json.dumps(config or {}), seed)

    @property
    def config(self):
        return json.loads(self._m.config_json())

    @property
    def parameter_count(self):
        return self._m.parameter_count()

    def __call__(self, lr, pan, training=False):
        return self._m.forward(lr, pan, training)

    def save(self, path, seed=0):
        self._m.save(str(path), seed)


def load_checkpoint(path):
    return Model(_core_model=_core.load_checkpoint(str(path)))


def metrics(x, x_ref):
    """CC, SAM (degrees), RMSE, ERGAS, PSNR and the per-band MAE curve; PSNR may be the string "inf"."""
    return json.loads(_core.metrics_json(x, x_ref))


def train(config, data, out_dir=None):
    """Train on a list of {"x_ref", "pan", "lr"} dicts; returns (Model, manifest dict)."""
    model, manifest = _core.train(json.dumps(config), list(data), None if out_dir is None else str(out_dir))
    return Model(_core_model=model), json.loads(manifest)


def evaluate(model, data):
    return json.loads(_core.evaluate(model._m, list(data)))


def evaluate_bicubic(data):
    return json.loads(_core.evaluate_bicubic(list(data)))


def main(argv=None):
    """Entry point mirroring the `hyperpan` executable."""
    import sys

    return _core.run_cli(list(sys.argv[1:] if argv is None else argv))
