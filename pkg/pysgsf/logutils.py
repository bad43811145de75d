import os
import logging
import datetime

__author__ = 'SGSFormerTools developers'
"""Logging set-up shared by all the pysgsf modules.

Every module writes DEBUG and above into a timestamped file under the log
directory and WARNING and above to the console.
"""


def sgsflogger(logname, logfile):
    """Create logger object to handle messages
    :param logname: name of the logger
    :type logname: str
    :param logfile: path to the file storing the messages
    :type logfile: str
    :return: logger
    :rtype: logging.Logger
    """
    logger = logging.getLogger(logname)
    logger.setLevel(logging.DEBUG)
    if logger.handlers:
        # already configured by a previous import
        return logger

    # create file handler which logs even debug messages
    fh = logging.FileHandler(logfile)
    fh.setLevel(logging.DEBUG)
    # create console handler with a higher log level
    ch = logging.StreamHandler()
    ch.setLevel(logging.WARNING)
    # create formatter and add it to the handlers
    formatter = logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s')
    fh.setFormatter(formatter)
    ch.setFormatter(formatter)
    # add the handlers to the logger
    logger.addHandler(fh)
    logger.addHandler(ch)

    return logger


logdir = os.environ.get('SGSF_LOGDIR', './logs/')
if not os.path.exists(logdir):
    os.makedirs(logdir)
logfile = os.path.join(logdir, ''.join(('SGSF_', datetime.datetime.now().strftime('%Y-%m-%d_%H:%M:%S'), '.log')))
