"""Exception hierarchy shared by every gfca module."""


class GFCAError(Exception):
    """Base class for all errors raised by gfca."""


class ParameterError(GFCAError, ValueError):
    """An argument is out of range or has the wrong shape."""


class DataError(GFCAError, ValueError):
    """Input data violates an invariant (non-finite entries, bad labels)."""


class MissingClassError(ParameterError):
    def __init__(self, class_id, where=""):
        self.class_id = int(class_id)
        msg = f"class {self.class_id} has no samples"
        if where:
            msg += f" in {where}"
        super().__init__(msg)


class DegenerateDataError(DataError):
    """Data is too degenerate for the requested statistic."""


class DegenerateSampleError(GFCAError, ArithmeticError):
    """The generator produced an all-zero feature vector."""


class ProtocolError(GFCAError, ValueError):
    """A few-shot protocol cannot be applied to the given dataset."""


class LoadError(GFCAError, OSError):
    """A feature file could not be parsed."""


class NumericError(GFCAError, FloatingPointError):
    def __init__(self, term, value=None, detail=""):
        self.term = term
        self.value = value
        msg = f"non-finite value in {term}"
        if value is not None:
            msg += f" ({value!r})"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class UnsupportedGraphError(GFCAError, TypeError):
    """Gradient requested for a computation the tape cannot differentiate."""


class UndefinedMetricError(GFCAError, ValueError):
    """A metric has no samples to average over."""


class ConfigError(GFCAError, ValueError):
    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class TrainingAborted(GFCAError, RuntimeError):
    def __init__(self, message, step=None, losses=None):
        self.step = step
        self.losses = dict(losses or {})
        super().__init__(message)
