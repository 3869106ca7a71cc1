"""Offline RL data augmentation by trajectory stitching and bridge generation."""
