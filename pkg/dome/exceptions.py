from typing import List, Optional

from dbt.exceptions import DbtRuntimeError


class DomeError(DbtRuntimeError):
    CODE = 20001
    MESSAGE = "DOME error"

    @property
    def type(self) -> str:
        return "DOME"


class InvalidArgumentError(DomeError):
    CODE = 20002
    MESSAGE = "Invalid argument"

    @property
    def type(self) -> str:
        return "Invalid argument"


class EncodingRangeError(DomeError):
    """A value does not fit the fixed-point range of the aggregation round."""

    CODE = 20003
    MESSAGE = "Encoding range error"

    @property
    def type(self) -> str:
        return "Encoding range"


class ProtocolError(DomeError):
    CODE = 20004
    MESSAGE = "Protocol error"

    @property
    def type(self) -> str:
        return "Protocol"


class EpochExhausted(DomeError):
    """
    Raised by client selection when fewer than B clients still hold unseen examples.
    `remaining` lists the clients that are still eligible, they form the short tail round
    of the epoch (empty when the epoch is over).
    """

    CODE = 20005
    MESSAGE = "Epoch exhausted"

    def __init__(self, msg: str, remaining: Optional[List[int]] = None) -> None:
        super().__init__(msg)
        self.remaining = list(remaining or [])

    @property
    def type(self) -> str:
        return "Epoch exhausted"


class BudgetViolationError(DomeError):
    CODE = 20006
    MESSAGE = "Privacy budget violation"

    @property
    def type(self) -> str:
        return "Privacy budget"


class DomeConfigError(DomeError):
    CODE = 20007
    MESSAGE = "Config error"

    @property
    def type(self) -> str:
        return "Config"


class ToleranceFailure(DomeError):
    CODE = 20008
    MESSAGE = "Tolerance failure"

    @property
    def type(self) -> str:
        return "Tolerance"
