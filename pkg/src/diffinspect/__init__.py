"""diffinspect: diffusion-based defect detection and instance segmentation
for SEM wafer inspection, with balanced sampling, COCO-style evaluation and
an inference random-box sweep harness."""

__version__ = "0.1.0"
