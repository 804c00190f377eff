"""Cluster-guided consistent-subject generation lab.

A small diffusion model trained on a synthetic hierarchical Gaussian-mixture
latent world, plus the one-shot projector tuning and cluster-guided inference
pipeline that steers generations into a chosen identity sub-cluster. Analytic
mixture scores serve as oracles for every guidance formula.
"""

__version__ = "0.1.0"
