"""Denoising-trained arbitrary-shape text spotting, desk scale.

Modules: geometry (cubic curves and text frames), dn_queries (noised query
construction and character sliding), attn_mask (group isolation),
assignment (bipartite matching and instability), losses, decoder, synth
(deterministic scene generation), train, cli.
"""

__version__ = "0.1.0"
