"""Semantic instance completion on synthetic RGB-D scenes."""
