"""Two-stage cascade brain-age regression on synthetic volumetric phantoms."""

__version__ = "0.1.0"
