import sys


def error_message_detail(error, error_detail: sys):
    _, _, exc_tb = error_detail.exc_info()

    if exc_tb is not None:
        file_name = exc_tb.tb_frame.f_code.co_filename
        line_no = exc_tb.tb_lineno
    else:
        # raised outside an except block: report the first frame outside this module
        frame = sys._getframe(1)
        while frame is not None and frame.f_code.co_filename == __file__:
            frame = frame.f_back
        file_name = frame.f_code.co_filename if frame else "<unknown>"
        line_no = frame.f_lineno if frame else -1

    error_message = "Error occurred python script name [{0}] - line number: [{1}] - error message : [{2}]".format(
        file_name, line_no, str(error)
    )

    return error_message


class RankShieldException(Exception):
    def __init__(self, error_message, error_detail: sys = sys):
        """
        :param error_message: error message in string format
        """
        super().__init__(error_message)
        self.raw_message = str(error_message)
        self.error_message = error_message_detail(
            error_message, error_detail=error_detail
        )

    def __str__(self):
        return self.error_message


class ShapeError(RankShieldException, ValueError):
    """Input dimension mismatch or non-finite values."""


class IndexOutOfRangeError(RankShieldException, IndexError):
    """Class or feature index outside the valid range."""


class UsageError(RankShieldException, ValueError):
    """Invalid arguments for an otherwise well-formed call."""


class CapabilityError(RankShieldException):
    """Operation not supported for this model or size."""


class ConfigError(RankShieldException, ValueError):
    """Invalid or missing configuration."""


class IngestionError(RankShieldException):
    """Dataset file could not be read or parsed."""


class EstimationError(RankShieldException):
    """Monte-Carlo estimation could not be carried out."""


class AttackError(RankShieldException):
    """Explanation attack failed."""


class NumericError(RankShieldException):
    """Linear program or other numeric routine failed."""


class UndefinedMetricError(RankShieldException, ValueError):
    """Metric is undefined for the given inputs."""


class TrainingDivergenceError(RankShieldException):
    def __init__(self, error_message, epoch: int, error_detail: sys = sys):
        super().__init__(error_message, error_detail)
        self.epoch = epoch
