"""Friedrich-Wintgen bound states in the continuum for cavity-waveguide
junctions by mode matching."""

__version__ = "0.1.0"
