"""Multi-modal text-guided video temporal grounding with co-attentional fusion."""

__version__ = "0.1.0"
