"""Three-tier (client, fog, cloud) secure geospatial service with a
network simulation harness."""

__version__ = "0.1.0"
