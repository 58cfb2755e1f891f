"""Ember: quantized fire segmentation on numpy.

Subpackages: ``numerics``, ``network``, ``quant``, ``training``, ``metrics``,
``bench``, ``data`` and ``cli``.
"""

__version__ = "0.1.0"
