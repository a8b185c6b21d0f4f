"""Exception hierarchy for the acoe_lab package."""


class AcoeError(Exception):
    """Base class for every error raised by acoe_lab."""


class ContractViolation(AcoeError, ValueError):
    """A precondition of an operation does not hold."""


class NonFiniteError(AcoeError, ArithmeticError):
    """
    A loss, gradient or target turned out NaN or infinite.

    Attributes:
        label (str): What was being computed (loss name, gradient, target).
        value (float): The offending value.
        step (int | None): Training step or iteration when it happened.
    """

    def __init__(self, label, value, step=None):
        self.label = label
        self.value = value
        self.step = step
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"Non-finite {label}{where}: {value}")


class DistributionMismatch(AcoeError, ValueError):
    """Two action distributions of different kind or dimension were compared."""


class SnapshotMismatch(AcoeError, TypeError):
    """An environment snapshot was restored into an incompatible environment."""


class ImpossibleObservation(AcoeError, ValueError):
    """A belief update was asked for an observation of zero probability."""


class TreeTooLarge(AcoeError, RuntimeError):
    """An observation-tree expansion exceeded the node cap."""


class SerializationError(AcoeError, ValueError):
    """A JSON document does not match the expected schema."""


class ConfigError(AcoeError, ValueError):
    """
    A run configuration could not be parsed.

    Attributes:
        field (str | None): Dotted path of the offending field.
        line (int | None): Line of a JSON syntax error.
        column (int | None): Column of a JSON syntax error.
    """

    def __init__(self, message, field=None, line=None, column=None):
        self.field = field
        self.line = line
        self.column = column
        location = ""
        if field is not None:
            location = f" [field: {field}]"
        elif line is not None:
            location = f" [line {line}, column {column}]"
        super().__init__(f"{message}{location}")


class VerificationFailure(AcoeError, AssertionError):
    """
    A theorem or lemma check found a violation.

    Attributes:
        counterexample (dict): Everything needed to reproduce the violation.
    """

    def __init__(self, message, counterexample):
        self.counterexample = counterexample
        super().__init__(message)
