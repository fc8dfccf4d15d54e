"""Splicing detection, localization and donor attribution for double-JPEG images.

The pipeline estimates the primary (first-compression) quantization steps of
every 8x8 block, clusters blocks by their step vectors, refines the resulting
label map morphologically, and decides pristine vs tampered from the number of
surviving clusters.
"""

__version__ = "0.1.0"
