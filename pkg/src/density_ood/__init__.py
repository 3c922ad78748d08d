"""
Density OoD - likelihood-based out-of-distribution detection with classical
and normalizing-flow density models.
"""

__version__ = "0.1.0"
