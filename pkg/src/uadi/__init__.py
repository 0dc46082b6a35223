"""Multi-task breast-ultrasound segmentation + classification with decoder-level task interaction."""

__version__ = "0.1.0"
