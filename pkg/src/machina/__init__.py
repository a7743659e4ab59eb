"""Trainable image codec, synthetic detection task and joint fine-tuning regimes.

Submodules are imported on demand so that ``machina.cli`` can cap BLAS threads
before numpy loads.
"""
__version__ = "0.1.0"
