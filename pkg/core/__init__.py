from .errors import ArgumentError, ConfigurationError, LabError, NumericalError
from .harness import execute
