"""
weakseg package

Knowledge-informed weakly supervised liver and tumor segmentation.

Modules:
--------
- `volio.py`         : Volume/Mask types, NIfTI-1 and clinical CSV I/O.
- `preprocess.py`    : HU windowing, orientation, liver masking, crop/pad.
- `clinical.py`      : TLVR, linear clinical model and feature selection.
- `losses.py`        : Dice, focal and weak (TLVR) losses with gradients.
- `gradcheck.py`     : finite-difference gradient checking.
- `segmenter.py`     : feature stack, logistic segmenter, Adam training.
- `postprocess.py`   : largest component, hole filling, active contour.
- `metrics.py`       : confusion counts, scores, size stratification.
- `phantom.py`       : synthetic CT phantoms with clinical records.
- `pipeline.py`      : two-step inference, ablation and smoothing runs.
- `report.py`        : rule-based diagnostic summary.
- `visualization.py` : matplotlib figures.
- `config.py`        : PipelineConfig and its key = value file format.
- `main.py`          : command-line interface.

Usage:
------
    from weakseg import generate_phantom, run_two_step, PipelineConfig

"""

from .config import PipelineConfig, dump_config, load_config
from .errors import WeaksegError, WeaksegWarning
from .phantom import PhantomSpec, generate_cohort, generate_phantom
from .pipeline import run_ablation, run_smoothing_experiment, run_two_step, train_two_step
from .report import emit_report
from .volio import Mask, Orientation, Volume, read_nifti, write_nifti

__all__ = [
    "Mask",
    "Orientation",
    "PhantomSpec",
    "PipelineConfig",
    "Volume",
    "WeaksegError",
    "WeaksegWarning",
    "dump_config",
    "emit_report",
    "generate_cohort",
    "generate_phantom",
    "load_config",
    "read_nifti",
    "run_ablation",
    "run_smoothing_experiment",
    "run_two_step",
    "train_two_step",
    "write_nifti",
]
