"""Unsupervised optical flow toolkit."""
