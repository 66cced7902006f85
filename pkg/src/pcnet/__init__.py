"""Alignment-free RGB-thermal salient object detection."""
