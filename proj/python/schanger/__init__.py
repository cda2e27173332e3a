"""Change-detection model toolkit.

Thin re-export of the compiled core. The extension lives inside this
package when installed as a wheel and on sys.path during development
builds, so both import paths are tried.
"""

try:
    from ._schanger import (
        ConfigError,
        DataError,
        Model,
        NumericError,
        ReconcileError,
        analyze,
        build,
        conv2d,
        evaluate,
        grad_check_probe,
        inflate,
        load,
        save,
        synth,
        train,
    )
except ImportError:
    from _schanger import (
        ConfigError,
        DataError,
        Model,
        NumericError,
        ReconcileError,
        analyze,
        build,
        conv2d,
        evaluate,
        grad_check_probe,
        inflate,
        load,
        save,
        synth,
        train,
    )

__all__ = [
    "ConfigError",
    "DataError",
    "Model",
    "NumericError",
    "ReconcileError",
    "analyze",
    "build",
    "conv2d",
    "evaluate",
    "grad_check_probe",
    "inflate",
    "load",
    "save",
    "synth",
    "train",
]

__version__ = "0.1.0"
