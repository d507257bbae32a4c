"""Multi-view low-resolution volume registration, segmentation and high-resolution mask fusion"""

__version__ = "0.1.0"
