"""
Potential Factory
Creates the appropriate confining potential from a name and a parameter map,
as read from the [potential] section of an experiment config.
"""

from typing import Dict, List, Tuple

from hypocert_base import InvalidArgumentError, PotentialKind
from potentials import PotentialSpec, make_bump_double_well, make_quadratic


def create_potential(name: str, params: Dict[str, float]) -> PotentialSpec:
    """Instantiate a potential.

    Args:
        name: one of PotentialKind.* strings
        params: numeric parameters (dim; amplitude, width; optional c1, c2, c3
            overrides applied after construction)

    Returns:
        PotentialSpec ready for check_hypotheses().

    Raises:
        InvalidArgumentError: If name is not supported.
    """
    potential_map = {
        PotentialKind.QUADRATIC: lambda: make_quadratic(int(params.get("dim", 1))),
        PotentialKind.BUMP_DOUBLE_WELL: lambda: make_bump_double_well(
            float(params.get("amplitude", 2.0)), float(params.get("width", 1.0))),
    }

    if name not in potential_map:
        raise InvalidArgumentError(f"Unsupported potential: {name}")

    p = potential_map[name]()
    overrides = {key: float(params[key]) for key in ("c1", "c2", "c3") if key in params}
    return p.with_constants(**overrides) if overrides else p


def available_potentials() -> List[Tuple[str, str]]:
    """Return (name, label) pairs for CLI help."""
    return [
        (PotentialKind.QUADRATIC, "quadratic – U = |x|^2/2 (params: dim)"),
        (PotentialKind.BUMP_DOUBLE_WELL,
         "bump_double_well – x^2/2 + A exp(-x^2/2w^2) (params: amplitude, width)"),
    ]
