"""Trainable implicit surface-deformation-field model of articulated feet.

Subpackages: mesh I/O and geometry (``mesh``), reverse-mode autodiff
(``autodiff``), the field network (``model``), objectives (``losses``),
differentiable rendering (``render``), unsupervised parts (``parts``),
synthetic data (``synth``), scan alignment (``align``), training and
evaluation orchestration (``pipeline``), and the command line (``cli``).

Set FOOTFIELD_BACKEND=numpy to run the hot kernels without numba.
"""

from .mesh import TriMesh, SampledPoints, load_mesh, save_mesh, sample_surface
from .model import FieldModel, FootInstance, InstanceSet, Registration

__all__ = [
    "TriMesh", "SampledPoints", "load_mesh", "save_mesh", "sample_surface",
    "FieldModel", "FootInstance", "InstanceSet", "Registration",
]

__version__ = "0.1.0"
