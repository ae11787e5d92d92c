"""Solvable structures for completely integrable Hamiltonian systems.

Construction and certification of canonical solvable structures, the
associated Pfaffian forms, integration by quadrature descent, and
action-angle extraction, validated on a small catalog of benchmark systems.
"""

from .symexpr import (
    Expression, Verdict, parse, differentiate, evaluate, simplify,
    is_zero, to_text,
)
from .exterior import (
    Chart, VectorField, DifferentialForm,
    hamiltonian_vector_field, poisson_bracket, lie_bracket,
    wedge, interior_product, exterior_derivative,
)

__version__ = "0.1.0"
