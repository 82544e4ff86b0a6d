"""Exception types shared across the package."""


class OrinormError(Exception):
    """Base class for all package-specific errors."""


class MalformedLine(OrinormError):
    def __init__(self, line_no, detail=""):
        self.line_no = line_no
        msg = f"malformed line {line_no}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class EmptyCloud(OrinormError):
    pass


class DegeneratePatch(OrinormError):
    pass


class RankDeficient(OrinormError):
    pass


class DisconnectedGraph(OrinormError):
    def __init__(self, n_components):
        self.n_components = n_components
        super().__init__(f"neighbor graph has {n_components} connected components")


class ShapeMismatch(OrinormError):
    def __init__(self, shape_a, shape_b, op=""):
        self.shape_a = tuple(shape_a)
        self.shape_b = tuple(shape_b)
        prefix = f"{op}: " if op else ""
        super().__init__(f"{prefix}incompatible shapes {self.shape_a} and {self.shape_b}")


class NotScalar(OrinormError):
    pass


class DegenerateNormal(OrinormError):
    pass


class NonFiniteGradient(OrinormError):
    pass


class EmptyInput(OrinormError):
    pass
