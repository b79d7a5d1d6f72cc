"""Exception hierarchy shared by every stage of the pipeline."""


class MarketShareError(Exception):
    """Base class for all package errors."""


# -- ingestion -------------------------------------------------------------

class IngestError(MarketShareError):
    pass


class MalformedRow(IngestError):
    def __init__(self, line, reason):
        self.line = line
        self.reason = reason
        super().__init__(f"line {line}: {reason}")


class DuplicateKey(IngestError):
    def __init__(self, line, key):
        self.line = line
        self.key = key
        super().__init__(f"line {line}: duplicate key {key}")


class EmptyFacts(IngestError):
    pass


class ConfigInvalid(MarketShareError):
    pass


class ZeroDenominator(MarketShareError):
    pass


# -- competitor graph ------------------------------------------------------

class DegenerateSeries(MarketShareError):
    """A series (raw or residualized) has zero variance."""


class DuplicateEdge(MarketShareError):
    pass


class MissingVolume(MarketShareError):
    def __init__(self, facility_id):
        self.facility_id = facility_id
        super().__init__(f"no volume entry for facility {facility_id!r}")


# -- regression ------------------------------------------------------------

class InsufficientMonths(MarketShareError):
    pass


class EmptyData(MarketShareError):
    pass


class SchemaMismatch(MarketShareError):
    pass


class LengthMismatch(MarketShareError):
    pass


class ZeroTarget(MarketShareError):
    pass


class EmptySpace(MarketShareError):
    pass


class UntrainedModel(MarketShareError):
    pass


# -- explain ---------------------------------------------------------------

class TooManyFeatures(MarketShareError):
    pass


class MissingCover(MarketShareError):
    pass


class AlignmentMismatch(MarketShareError):
    pass


# -- reports ---------------------------------------------------------------

class TooFewAnnotators(MarketShareError):
    def __init__(self, component_id, n_scores):
        self.component_id = component_id
        self.n_scores = n_scores
        super().__init__(
            f"component {component_id!r} has {n_scores} score(s); at least 2 required")


class StageError(MarketShareError):
    """Wraps an error raised inside a pipeline stage with the stage label."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
