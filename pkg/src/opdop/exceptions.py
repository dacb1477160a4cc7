class StructuralError(ValueError):
    """Shapes or indices of inputs do not agree with the model."""


class ConfigurationError(ValueError):
    """An algorithm parameter is outside its admissible range."""


class NumericError(ArithmeticError):
    """A non-finite or otherwise unusable number appeared in a computation."""


class InfeasibleConstraint(ValueError):
    """No policy satisfies ``V_g(x_1) >= b``.

    ``max_utility`` carries the largest achievable utility value from ``x_1``.
    """

    def __init__(self, max_utility: float, offset: float):
        self.max_utility = float(max_utility)
        self.offset = float(offset)
        super().__init__(
            f"constraint offset b={offset:.6g} exceeds the maximal achievable "
            f"utility value {max_utility:.6g}"
        )


class GenerationError(RuntimeError):
    """An environment generator could not produce a valid instance."""
