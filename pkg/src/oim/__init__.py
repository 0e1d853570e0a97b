"""Object instance mining for weakly supervised object detection."""

__version__ = "0.1.0"
