"""Joint LiDAR detection and multi-object tracking with attention-refined affinities.

Kept import-free so the command line can cap BLAS threads before numpy loads.
"""

__version__ = "0.1.0"
