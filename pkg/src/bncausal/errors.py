"""Exception hierarchy.

Everything raised deliberately by the package derives from :class:`BnCausalError`;
the CLI maps these to exit code 2.
"""


class BnCausalError(Exception):
    pass


class DataError(BnCausalError, ValueError):
    """Malformed or contract-violating input data."""


class MissingColumn(DataError):
    pass


class NonBinaryRole(DataError):
    pass


class EmptyFile(DataError):
    pass


class RaggedRow(DataError):
    pass


class MissingValue(DataError):
    pass


class UnknownLevel(DataError):
    pass


class ArityMismatch(BnCausalError, ValueError):
    pass


class CyclicGraph(BnCausalError, ValueError):
    pass


class UnobservedParentConfig(BnCausalError):
    """A query touched a CPT row whose parent configuration never occurred in the fit data."""

    def __init__(self, node, parent_config, row=None):
        self.node = node
        self.parent_config = tuple(parent_config)
        self.row = row
        where = "" if row is None else f" (row {row})"
        super().__init__(
            f"CPT row for node {node} with parent configuration {self.parent_config} "
            f"was never observed; MLE undefined{where}"
        )


class UndefinedCptRow(UnobservedParentConfig):
    """Sampling reached a CPT row that has no defined distribution."""


class ZeroEvidenceProbability(BnCausalError):
    def __init__(self, row=None):
        self.row = row
        where = "" if row is None else f" at row {row}"
        super().__init__(f"evidence has zero probability{where}")


class EmptyArm(BnCausalError):
    def __init__(self, arm):
        self.arm = arm
        super().__init__(f"treatment arm T={arm} has no units")
