"""Flow-matching occupancy refinement over tri-perspective-view selective scans."""

__version__ = "0.1.0"
