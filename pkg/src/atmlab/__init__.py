"""Desk-scale adversarial tuning laboratory for retrieval-augmented QA.

Two tiny language-model agents are tuned against each other: an attacker that
fabricates misleading documents and shuffles retrieval lists, and a generator
hardened to keep answering correctly anyway. The package covers the synthetic
corpus, lexical retrieval, the model substrate with exact gradients, every tuning
loss, the iterative optimization loop, and the full evaluation harness.
"""

__version__ = "0.1.0"
