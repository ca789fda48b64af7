"""Multimodal ad classifier: autodiff core, text and vision networks,
outer-product fusion, classical baselines, synthetic data, CLI."""

__version__ = "0.1.0"
