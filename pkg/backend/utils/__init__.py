"""Utils package for longview."""
from utils.logger import logger

__all__ = ["logger"]
