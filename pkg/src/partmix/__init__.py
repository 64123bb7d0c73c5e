"""partmix: template-mixture and part-model detectors with a scaling harness."""

__version__ = "0.1.0"
