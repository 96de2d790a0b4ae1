"""Power measurement stack with a fully virtual 20 kHz sensor device."""

__version__ = "0.1.0"

from .protocol import (  # noqa: F401
    ProtocolError,
    SampleFrame,
    SensorConfig,
    TimestampFrame,
)
from .scenario import (  # noqa: F401
    Constant,
    NoiseModel,
    SquareWave,
    Trace,
    default_configs,
)
