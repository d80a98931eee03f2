"""OIE-to-KG fact linking: benchmark construction, contrastive pre-ranking,
fact re-ranking and out-of-KG detection."""

__version__ = "0.1.0"
