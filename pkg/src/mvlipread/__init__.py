"""Multi-view lipreading: per-view pretrained encoders with BLSTM streams,
fused by a second BLSTM, trained on frame-labelled utterances."""

__version__ = "0.1.0"
