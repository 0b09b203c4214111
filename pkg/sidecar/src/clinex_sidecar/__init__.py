"""Model sidecar service and offline adapter trainer.

Serves sentence embeddings, token embeddings and clinical NER over a
small HTTP API consumed by the extraction harness, and trains low-rank
adapters on (minimal prompt, structured answer) pairs at smoke scale.
"""

__version__ = "0.1.0"
