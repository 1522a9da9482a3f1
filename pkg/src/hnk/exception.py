import logging
from typing import Optional


class HnkException(Exception):
    def __init__(self, message):
        super().__init__(message)
        logger = logging.getLogger("debug_log")
        logger.error(message)


class HnkExceptBadOptions(HnkException):
    pass


class HnkExceptBadFile(HnkException):
    pass


class HnkExceptBadConfig(HnkException):
    pass


class HnkExceptShapeMismatch(HnkException):
    pass


class HnkExceptUndefinedMetric(HnkException):
    pass


class HnkExceptInternalError(HnkException):
    pass


class HnkExceptNumeric(HnkException):
    """
    Base for failures of the numerics themselves. The CLI maps this family to exit code 2
    """
    pass


class HnkExceptNonFinite(HnkExceptNumeric):
    def __init__(self, message, batch_index: Optional[int] = None):
        super().__init__(message)
        # Set by the trainer when the offending value came out of a mini-batch
        self.batch_index: Optional[int] = batch_index


class HnkExceptDegeneratePrediction(HnkExceptNumeric):
    pass


class HnkExceptSelftestFailed(HnkExceptNumeric):
    pass
