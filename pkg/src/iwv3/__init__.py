"""iwv3: a lossy+lossless wavelet-style image codec.

Pipeline: reversible color transform -> lifting transform (classical or
learned) -> QStep quantization -> autoregressive entropy coding with a
Gaussian-mixture probability model -> range-coded bitstream.  Includes a
small reverse-mode tensor engine used for training and per-image online
optimization.
"""

__version__ = "0.1.0"
