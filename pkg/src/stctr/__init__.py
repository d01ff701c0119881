"""Context-aware CTR modelling lab: autodiff core, gated/meta/modulated model,
ranking metrics and a synthetic spatiotemporal click generator."""

__version__ = "0.1.0"
