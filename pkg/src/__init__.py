"""
src package

Root of the source tree. It holds a single package:
- `weakseg` : knowledge-informed weakly supervised liver and tumor
  segmentation (two-step global/local framework, clinical TLVR weak labels,
  output refinement, evaluation and phantom experiments).

Usage:
------
With `src` on the import path (pytest.ini sets `pythonpath = src`):

    from weakseg.pipeline import run_two_step
    from weakseg.phantom import generate_phantom

or from the command line:

    python -m weakseg.main --help

"""
