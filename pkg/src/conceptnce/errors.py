"""Exception types raised across the package."""


class ConceptNCEError(Exception):
    """Base class for every error raised by this package."""


# dataset / ontology
class MalformedLine(ConceptNCEError, ValueError):
    def __init__(self, line_no: int, detail: str = ""):
        self.line_no = line_no
        super().__init__(f"line {line_no}: malformed record{': ' + detail if detail else ''}")


class UnknownConcept(ConceptNCEError, ValueError):
    def __init__(self, name: str, line_no: int | None = None):
        self.name = name
        self.line_no = line_no
        where = f" (line {line_no})" if line_no is not None else ""
        super().__init__(f"unknown concept {name!r}{where}")


class DuplicateConcept(ConceptNCEError, ValueError):
    def __init__(self, name: str, study_id: str):
        self.name = name
        self.study_id = study_id
        super().__init__(f"concept {name!r} listed twice in study {study_id!r}")


class InvariantViolation(ConceptNCEError, ValueError):
    pass


class DuplicateName(ConceptNCEError, ValueError):
    pass


class EmptyName(ConceptNCEError, ValueError):
    pass


class EmptyVocabulary(ConceptNCEError, ValueError):
    pass


class IoFailure(ConceptNCEError, OSError):
    pass


# generation / sampling
class ConfigInvalid(ConceptNCEError, ValueError):
    pass


class UnknownPresence(ConceptNCEError, ValueError):
    pass


class NoKnownConcept(ConceptNCEError, ValueError):
    def __init__(self, study_id: str):
        self.study_id = study_id
        super().__init__(f"study {study_id!r} has no concept with known presence")


# relabeling
class ShapeMismatch(ConceptNCEError, ValueError):
    pass


class MissingConcept(ConceptNCEError, KeyError):
    def __init__(self, concept: str, study_id: str):
        self.concept = concept
        self.study_id = study_id
        super().__init__(f"concept {concept!r} missing from study {study_id!r}")

    def __str__(self) -> str:
        return self.args[0]


class OracleFailure(ConceptNCEError, RuntimeError):
    pass


class ProcessSpawnFailure(OracleFailure):
    pass


class ProtocolViolation(OracleFailure):
    def __init__(self, line: str):
        self.line = line
        super().__init__(f"unexpected oracle reply {line!r}")


class OracleTimeout(OracleFailure, TimeoutError):
    pass


# numerics / alignment
class NonFiniteInput(ConceptNCEError, ValueError):
    pass


class DegenerateNorm(ConceptNCEError, ArithmeticError):
    pass


class DegenerateAggregate(DegenerateNorm):
    pass


class NotNormalized(ConceptNCEError, ValueError):
    pass


class EmptyGrid(ConceptNCEError, ValueError):
    pass


class AllRowsEmpty(ConceptNCEError, ValueError):
    pass


# inference / metrics
class EmptyText(ConceptNCEError, ValueError):
    pass


class ImageNotFound(ConceptNCEError, FileNotFoundError):
    pass


class NoBoxes(ConceptNCEError, ValueError):
    pass


class DegenerateLabels(ConceptNCEError, ValueError):
    pass
