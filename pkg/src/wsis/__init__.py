"""Weakly supervised instance segmentation on synthetic shapes.

Detection, instance-mask generation, and segmentation heads trained jointly
from image-level labels, with evaluation tooling and a CLI.
"""

__version__ = "0.1.0"
