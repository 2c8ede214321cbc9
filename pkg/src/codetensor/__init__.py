"""Malware feature tensors from binary texture, and adversarial detector hardening.

Binaries become grayscale images, images are cut into texture bands, the
most distinctive bands are picked by locality-sensitive hashing and packed
into a low-tubal-rank tensor of 64x64 feature matrices. Baseline detectors
are trained on those matrices and then attacked and hardened by a GAN.
"""

__version__ = "0.1.0"
