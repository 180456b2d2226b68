"""Two-stage target speaker extraction: a TF-domain discriminative front-end
followed by a codec language model that regenerates the target speech."""

__version__ = "0.1.0"
