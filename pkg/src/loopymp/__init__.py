from . import autodiff
from .beliefs import *
from .bethe import *
from .cccp import *
from .channel import *
from .engine import *
from .errors import *
from .experiments import *
from .graph import *
from .llr import *
from .network import *
from .oracle import *
from .tasks import *
from .training import *
from .utils import *
from .workflow import *

__version__ = "1.0.0"
