"""Exception and warning types shared across modules.

Every error carries the name of the module that raised it so the CLI can
report module-qualified messages and map failures onto exit codes.
"""


class GroundGenError(Exception):
    module = "groundgen"
    exit_code = 2

    def __str__(self) -> str:
        return f"[{self.module}] {super().__str__()}"


# kb
class DataError(GroundGenError):
    module = "kb"


class ParseError(DataError):
    pass


class SchemaError(DataError):
    pass


class DuplicateEntityError(DataError):
    pass


class ReferentialError(DataError):
    pass


class ReferentialWarning(UserWarning):
    pass


# tokenizer
class TokenDecodeError(GroundGenError):
    module = "tokenizer"


# trie
class TrieError(GroundGenError):
    module = "trie"


class EmptyTrieError(TrieError):
    pass


class InvalidPrefixError(TrieError):
    pass


class UnresolvedError(TrieError):
    pass


# vindex / encoders
class IndexBuildError(GroundGenError):
    module = "vindex"


class DegenerateEmbeddingError(IndexBuildError):
    pass


class EmptyIndexError(GroundGenError):
    module = "vindex"


class DimensionError(GroundGenError):
    module = "vindex"


class DomainError(GroundGenError):
    module = "vindex"


class MissingFeatureError(GroundGenError):
    module = "encoders"


# losses / training
class NumericError(GroundGenError):
    module = "losses"
    exit_code = 3


class EmptyTargetError(GroundGenError):
    module = "losses"


class DivergenceError(NumericError):
    module = "decoder"


# sampler
class InfeasibleBatchError(GroundGenError):
    module = "sampler"


class EmptyGroupsWarning(UserWarning):
    pass


class SynthError(GroundGenError):
    module = "cli"


# eval
class EvalDomainError(GroundGenError):
    module = "eval"


class MissingPredictionWarning(UserWarning):
    pass
