"""Accident-impact prediction: ingestion, labelling, cascade LSTM/CNN models."""
import logging
import os

__version__ = "0.1.0"

_level = os.environ.get("IMPACTCAST_LOG")
if _level:
    logging.basicConfig(level=_level.upper(), format="%(levelname)s %(name)s: %(message)s")
