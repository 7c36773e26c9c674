"""In-situ particle diffusion workflow at desk scale.

A synthetic particle source streams step frames through a staging
endpoint to an analysis pipeline that trims, sorts and assembles
particle-major trajectories, which are then reduced to per-region
mean-square-displacement and diffusion-coefficient series.
"""

__version__ = "0.1.0"
