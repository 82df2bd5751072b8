"""Synthetic corpus, manifests, vocabulary and batching."""
__all__ = ["vocab", "corpus", "manifest", "batching"]
