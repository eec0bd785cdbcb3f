"""Vehicle location and speed estimation from partial connected-vehicle data.

Subpackages follow the pipeline order: ``trafficsim`` produces trajectories,
``rco`` turns them into fixed-size grids, ``crate_net`` and ``training`` fit
the estimator, ``evaluation`` scores it, and ``cli`` ties everything together.
"""

__version__ = "0.1.0"
