"""Wildfire spread segmentation engine and its HTTP service."""
