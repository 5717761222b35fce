from .weakmeaserror import *
from .weakmeasclasses import *
from .weakmeasutils import *
from .simplex import *
from .operators import *
from .discrete import *
from .continuous import *
from .generalized import *
from .ensemble import *

__version__ = "0.2.0"
