"""Block-wise knowledge amalgamation of pixel-prediction teachers.

Trains a single compact encoder-decoder student that reproduces several
frozen single-task teachers (segmentation, depth, surface normals) from
unlabeled images alone, one block at a time, then assembles and fine-tunes
a branched multi-head network.
"""

__version__ = "0.1.0"
