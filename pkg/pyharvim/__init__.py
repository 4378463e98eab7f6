"""
Hard-to-remove watermark placement learned against a flow-prior inpainting remover
"""
from .exceptions import *  # noqa:
from .const import *  # noqa:
from .utils import *  # noqa:
from .tensor import *  # noqa:
from .optim import *  # noqa:
from .checkpoint import *  # noqa:
from .assets import *  # noqa:
from .flow import *  # noqa:
from .watermark import *  # noqa:
from .solver import *  # noqa:
from .harvim import *  # noqa:
from .metrics import *  # noqa:
from .evaluate import *  # noqa:
from .config import *  # noqa:
from .storage import *  # noqa:
from .gradcheck import *  # noqa:
