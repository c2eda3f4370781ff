from .logger import logger as evtail_logger
