"""NanoFlow: parameter-shared normalizing flows and their desk-scale experiments."""

__version__ = "0.1.0"
