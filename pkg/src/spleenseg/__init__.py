"""Multi-view splenomegaly segmentation: large-kernel FCN + PatchGAN training, fusion and evaluation."""

__version__ = "0.1.0"
