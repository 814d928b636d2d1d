"""Track-informed attribution of radiation alarms to moving objects."""

__version__ = "0.1.0"
