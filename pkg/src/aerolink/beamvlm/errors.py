""" Exceptions raised by beamvlm.

Every error derives from BeamError and from the closest builtin, so callers
may catch either ``BeamError`` or e.g. ``ValueError``.
"""


class BeamError(Exception):
    """ Root of the beamvlm errors. """
    def __init__(self, value):
        super(BeamError, self).__init__(value)
        self.value = value

    @property
    def kind(self):
        return type(self).__name__

    def __str__(self):
        return str(self.value)


# Configuration ####################################################################################
class ConfigError(BeamError, ValueError):
    pass

class InvalidSector(ConfigError):
    pass

class InvalidSize(ConfigError):
    pass


# Shapes ###########################################################################################
class DimensionMismatch(BeamError, ValueError):
    pass

class ShapeError(BeamError, ValueError):
    pass


# Storage ##########################################################################################
class StorageError(BeamError, OSError):
    """ Reading or writing a dataset, checkpoint or report failed. """
    pass

class FormatError(StorageError):
    pass

class CorruptionError(StorageError):
    pass

class VersionError(StorageError):
    pass


# Scene ############################################################################################
class OutOfView(BeamError, ValueError):
    pass

class UavNotFound(BeamError, LookupError):
    pass

class SampleOutOfRange(BeamError, IndexError):
    pass


# Text #############################################################################################
class DetokenizeError(BeamError, ValueError):
    pass

class AnswerError(BeamError, ValueError):
    """ Generated text does not follow the answer grammar. """
    pass

class MalformedCount(AnswerError):
    pass

class OutOfRange(AnswerError):
    pass

class AnswerSyntaxError(AnswerError):
    pass

class EmptyHistory(BeamError, ValueError):
    pass


# Network ##########################################################################################
class EmptyMask(BeamError, ValueError):
    pass

class GraphError(BeamError, RuntimeError):
    pass

class ContextOverflow(BeamError, ValueError):
    pass

class DivergenceError(BeamError, ArithmeticError):
    pass


# Evaluation #######################################################################################
class LengthMismatch(BeamError, ValueError):
    pass

class EmptyReport(BeamError, ValueError):
    pass
