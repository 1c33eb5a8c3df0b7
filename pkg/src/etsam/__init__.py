"""Hierarchical scene-text detection and layout analysis.

The pipeline detects words, word groups, text-lines, and paragraphs from a
single image by predicting a text-center heatmap, extracting sparse peak
points from it, and decoding one mask per granularity for every point prompt.
Submodules are intentionally importable on their own; heavyweight imports
(torch) stay out of this package root so CLI start-up and geometry-only use
remain cheap.
"""

__version__ = "0.1.0"
