"""backbonesim: pathwise backbone decomposition of supercritical
superprocesses with spatially dependent branching, at desk scale.

Subpackages follow the pipeline: `mechanism` (branching mechanism and
derived laws), `motion` (diffusion, killing, transformed backbone
motion), `fixedpoint` (nonlinear integral-equation solvers on space-time
grids), `particle` (branching particle systems and exit measures),
`backbone` (the decorated process), `stats` (verification layer),
`cli` (scenario-driven orchestration).
"""

__version__ = "0.1.0"

from .kernels import BACKEND as kernel_backend  # noqa: F401
