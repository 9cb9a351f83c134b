"""Keyword spotting with speech-augmentation-based unsupervised pre-training.

Everything runs on a small from-scratch reverse-mode autodiff core: a
CNN-Attention classifier, log-mel frontend, SNR noise corruption, speed and
volume perturbation, a siamese similarity + mean-feature-reconstruction
pre-training objective with APC/MPC baselines, and a two-stage trainer with
a binary checkpoint container. See the `kwsaug` CLI for end-to-end runs.
"""

__version__ = "0.1.0"
