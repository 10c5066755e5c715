"""gitfarm: Git as a stateful, identity-scoped execution service.

A gateway routes authenticated clients to backend nodes that hold
pre-warmed repository checkouts and sandbox slots; sessions execute
ordered git command chains remotely so clients never keep local clones.
"""

__version__ = "0.1.0"
