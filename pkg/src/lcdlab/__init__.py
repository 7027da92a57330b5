"""Loop closure detection laboratory: LiDAR scans to occupancy top-views,
adversarially learned place codes, sequence matching, and evaluation."""

__version__ = "0.1.0"
