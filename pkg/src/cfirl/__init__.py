"""Batch counterfactual inverse reinforcement learning on a simulated oncology cohort."""

__version__ = "0.1.0"
