"""Untrained convolutional priors for audio restoration.

A randomly initialized dense-dilated U-Net is fit by gradient descent to a
single corrupted spectrogram observation; its output is the restoration.
Supports denoising, inpainting and two-source separation, with a from-scratch
autodiff engine, STFT front end, Adam optimizer, evaluation metrics and an
experiment CLI.
"""

__version__ = "0.1.0"
