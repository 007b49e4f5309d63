from .config_serializers import *
from .run_serializers import *
