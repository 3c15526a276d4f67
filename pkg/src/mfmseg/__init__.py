"""Pixel-level separation of printed and handwritten text, with overlap as its own class."""
from .labels import BG, HT, OV, PT, LabelMap, decode_gt, encode_gt
from .models import build_model

__all__ = ["PT", "HT", "BG", "OV", "LabelMap", "decode_gt", "encode_gt", "build_model"]
__version__ = "0.1.0"
