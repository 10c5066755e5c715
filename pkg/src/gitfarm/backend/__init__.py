"""Backend execution layer: bare clones, warm pools, sandboxed sessions."""
