"""maglab: numerical experiments with magnetic geodesic flows on surfaces."""

__version__ = "0.1.0"
