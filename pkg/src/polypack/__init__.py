"""polypack: symbolic polynomial indexing and dense packing for structured tensors."""

__version__ = "0.1.0"
