class DimMismatch(ValueError):
    """Two objects that must agree on a dimension do not."""


class ShapeMismatch(ValueError):
    pass


class NonFinite(ArithmeticError):
    pass


class StageMissing(RuntimeError):
    def __init__(self, stage: str, detail: str = ""):
        self.stage = stage
        msg = f"required stage {stage!r} has not been run"
        super().__init__(msg + (f" ({detail})" if detail else ""))
