from . import experiment, report, response
