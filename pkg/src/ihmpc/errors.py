class NumericalError(Exception):
    """Base class for solver failures (CLI exit code 3)."""


class NoStabilizingSolution(NumericalError):
    pass


class IllConditioned(NumericalError):
    pass


class Z1Singular(NumericalError):
    """The DARE Jacobian system is singular: the implicit function theorem does not apply."""


class SingularKkt(NumericalError):
    pass


class QpError(NumericalError):
    def __init__(self, msg, solution=None):
        super().__init__(msg)
        self.solution = solution
