"""Direct-L2 mixture projection filtering at desk scale.

Subpackages are organized by role: ``quad`` (integration backbone),
``geometry`` (metrics, distances, projections), ``families`` (the simple
mixture manifold and its Bayes basis update), ``dynamics`` (filtering-system
coefficients and operators), ``discrete_filter`` / ``continuous_filter``
(the two projection filters), ``oracles`` (independent reference solvers),
and ``cli`` (the batch experiment runner).
"""

from . import (  # noqa: F401
    cli,
    continuous_filter,
    discrete_filter,
    dynamics,
    families,
    geometry,
    oracles,
    quad,
)

__version__ = "0.1.0"
