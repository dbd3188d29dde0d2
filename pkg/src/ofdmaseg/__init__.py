"""Modulation-type segmentation of OFDMA spectrograms.

Synthesize OFDMA frames with random resource-block layouts, pass them
through a simple channel, turn them into labelled spectrogram images, and
train a flattened-convolution segmentation network on them with a small
numpy autodiff engine.
"""

__version__ = "0.1.0"
