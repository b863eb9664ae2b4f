"""GeoFormer: building height / footprint regression at 100 m from Sentinel-like stacks."""

__version__ = "0.1.0"
