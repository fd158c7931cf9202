"""Exception hierarchy shared by all vladapt modules."""


class VLAdaptError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(VLAdaptError, ValueError):
    pass


class InputError(VLAdaptError, ValueError):
    pass


class ShapeError(InputError):
    pass


class ModeError(VLAdaptError, ValueError):
    pass


class ResolutionError(VLAdaptError):
    """An adaptation could not be resolved because a resource is missing."""

    def __init__(self, kind: str, missing: str):
        self.kind = kind
        self.missing = missing
        super().__init__(f"cannot resolve adaptation {kind!r}: missing {missing}")


class ParseError(VLAdaptError, ValueError):
    def __init__(self, path, line: int, message: str):
        self.path = path
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


class TrainingDivergence(VLAdaptError, ArithmeticError):
    def __init__(self, step: int, loss: float, curve=None):
        self.step = step
        self.loss = loss
        self.curve = list(curve or [])
        super().__init__(f"non-finite loss {loss} at step {step}")


class UnsupportedRelation(VLAdaptError):
    """A template has no phrasing for the query's relation; the caller skips it."""

    def __init__(self, template_id: int, relation: str):
        self.template_id = template_id
        self.relation = relation
        super().__init__(f"template {template_id} has no pattern for relation {relation!r}")
