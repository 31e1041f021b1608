"""Skin-lesion segmentation with pyramid pooling modules in the deep skip connections.

Kept import-free so that ``ppmseg.cli`` can pin BLAS threads before numpy loads.
"""

__version__ = "0.1.0"
