"""Identity-conditioned semantic image synthesis at desk scale.

A cross-attention generator merges semantic-mask, per-class style, and
identity-embedding information; training adds an identity-preservation loss;
the evaluation harness measures identity preservation and impersonation
attacks against an independently trained face-recognition embedder.
"""

__version__ = "0.1.0"
