"""Eight-class protein secondary structure labeling.

Convolutional sequence labelers over position-specific scoring matrix
features, with optional next-step label conditioning, beam-search
decoding, and log-probability ensembling. All numerics run on a small
float32 autodiff core (:mod:`chaincnn.tensor`).
"""

__version__ = "0.1.0"
