"""Segmentation network: layer specs, the graph executor and the model builder."""
