from .runs_controller import *
