"""Contrastive speaker-embedding learning: SimCLR, MoCo, ProtoNCE and SupCon on a TDNN encoder."""

__version__ = "0.1.0"
