# This file is designed to be `exec`ed, don't do too much here

__version__ = "0.3.0"
