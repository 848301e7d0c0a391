"""Numerical constructions of coefficient pairs with equal Dirichlet-to-Neumann maps.

Submodules
----------
tensorfield
    Scalar and matrix fields on boxes, the metric/conductivity dictionary,
    diffeomorphisms and pushforwards.
gevrey
    Gevrey bumps, truncated seminorms and the algebra/reciprocal checks.
jacobian
    Compactly supported divergence primitives and the Moser flow with
    prescribed Jacobian determinant.
fixedfreq
    Conductivity pairs at a fixed nonzero frequency.
fixedpot
    Metric pairs for a fixed nonconstant potential.
dnmap
    Trilinear finite elements, discrete DN matrices and refinement studies.
cli
    Configuration, pipelines and reports (``dnpairs`` console script).
"""
from .dnmap import (CoefficientPair, Mesh, control_compare, dn_compare, dn_matrix,
                    solution_correspondence, spectral_margin)
from .errors import DnPairsError
from .fixedfreq import FreqConfig, build_pair, build_test_function, nonisometry_certificate
from .fixedpot import PotConfig, build_pair_fp, volume_certificate
from .jacobian import JacobianConfig, div_primitive, moser_flow, prescribed_jacobian
from .tensorfield import Box, identity_matrix

__version__ = "0.1.0"

__all__ = [
    "Box", "CoefficientPair", "DnPairsError", "FreqConfig", "JacobianConfig", "Mesh", "PotConfig",
    "build_pair", "build_pair_fp", "build_test_function", "control_compare", "div_primitive",
    "dn_compare", "dn_matrix", "identity_matrix", "moser_flow", "nonisometry_certificate",
    "prescribed_jacobian", "solution_correspondence", "spectral_margin", "volume_certificate",
]
