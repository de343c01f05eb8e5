"""Label-efficient 3D detection and classification on volumetric data."""
__version__ = "0.1.0"
