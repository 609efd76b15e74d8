"""Detecting and tracking periodic open-air markets in satellite image time series."""

from .raster import (CandidateLocation, DayOfWeek, Generation, GeoTransform, LocationDataset,
                     Scene, SceneQuality, local_day_of_week, rasterize_polygon)
from .detect import CUTOFF, THRESHOLDS, threshold_grid

__version__ = "0.1.0"

__all__ = ["CandidateLocation", "DayOfWeek", "Generation", "GeoTransform", "LocationDataset",
           "Scene", "SceneQuality", "local_day_of_week", "rasterize_polygon",
           "CUTOFF", "THRESHOLDS", "threshold_grid"]
