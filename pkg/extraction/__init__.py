"""
chartx - Chart information extraction

Classifies the chart type of a chart image, detects its text blocks,
upscales and reads each block, and assigns each block a functional role.
"""

__version__ = '0.1.0'

from . import errors
from . import config
from . import metrics
