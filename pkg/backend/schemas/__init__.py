"""Schemas package for longview."""
from schemas.alignment import *
from schemas.cohort import *
from schemas.common import *
from schemas.evaluation import *
from schemas.network import *
from schemas.training import *
