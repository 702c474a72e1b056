"""Lens-aberration degradation toolkit.

Sequential ray tracing, spatially varying PSF grids, LQ/GT image synthesis,
optical image-quality metrics (OIQE, OIQ, ODE), lens benchmarking and a
small automatic lens designer.
"""

__version__ = "0.1.0"
