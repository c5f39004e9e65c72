"""
Exception hierarchy for the continual graph embedding engine.
Each error carries the process exit code used by the command line.
"""


class CGRLError(Exception):
    """Base error; exit_code is returned by cgrl.main()"""
    exit_code = 1


class ConfigError(CGRLError):
    """Invalid configuration, split ratios or experiment spec"""
    exit_code = 2


class DataError(CGRLError):
    """Malformed or missing dataset / run files"""
    exit_code = 3


class UnknownEntityError(DataError):
    """Query references an entity or relation the model never trained on"""


class TrainingDivergenceError(CGRLError):
    """Loss became non-finite during training"""
    exit_code = 4
