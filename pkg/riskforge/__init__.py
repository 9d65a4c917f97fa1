"""riskforge: interpretable multimodal in-hospital mortality risk for ICU cardiac arrest cohorts."""

__version__ = "0.1.0"
