"""Video-pose action recognition with coupled spatio-temporal attention."""

__version__ = "0.1.0"
