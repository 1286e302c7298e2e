"""Exception types shared across the package."""


class SpeechChainError(Exception):
    pass


class ContractError(SpeechChainError, ValueError):
    """A precondition of an operation was violated."""


class ShapeError(ContractError):
    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        joined = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class DomainError(SpeechChainError, ValueError):
    """Input outside the mathematical domain of a primitive (e.g. log of a nonpositive value)."""


class CheckpointError(SpeechChainError):
    pass


class ConfigError(SpeechChainError, ValueError):
    pass


class MissingArtifactError(SpeechChainError, FileNotFoundError):
    pass
