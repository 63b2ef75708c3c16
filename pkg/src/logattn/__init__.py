"""Log attention gating for small-object detection, with a toy detector,
synthetic data, VOC ingestion and COCO-style size-binned evaluation."""

__version__ = "0.1.0"
