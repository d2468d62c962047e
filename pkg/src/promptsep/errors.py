"""Exception types raised across the package."""


class ShapeError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


class ContractError(ValueError):
    """A precondition of an operation was violated by the caller."""


class TemplateError(ContractError):
    pass


class VocabularyError(ContractError):
    pass
