"""Distribution-feeder application: feeder model, profiles and the OPF comparison."""

from .feeder import *  # noqa: F401,F403
from .opf import *  # noqa: F401,F403
from .profiles import *  # noqa: F401,F403
