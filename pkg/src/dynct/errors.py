"""Exception types shared across the toolkit."""


class VolumeFormatError(ValueError):
    """A volume or sinogram file is malformed or inconsistent with its sidecar."""


class PhantomSpecError(ValueError):
    """A phantom description violates its geometric constraints."""


class NumericFailure(ArithmeticError):
    """A non-finite value appeared during optimization.

    ``iteration`` and ``name`` locate the failure when known.
    """

    def __init__(self, message, iteration=None, name=None):
        self.iteration = iteration
        self.name = name
        where = []
        if iteration is not None:
            where.append(f"iteration {iteration}")
        if name is not None:
            where.append(f"parameter {name!r}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
