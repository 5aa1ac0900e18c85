"""RDA1 exporter for pretrained (or stand-in) dual encoders."""

__version__ = "0.1.0"
