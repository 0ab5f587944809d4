__version__ = "0.1.0"

from dialstory.cli import main
