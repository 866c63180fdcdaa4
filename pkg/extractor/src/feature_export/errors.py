class FeatureExportError(Exception):
    """Base class for extractor failures."""


class ClassMapError(FeatureExportError):
    """A class directory does not fit the expected class map."""


class NoImagesError(FeatureExportError):
    """The input tree yielded no readable images."""


class FormatError(FeatureExportError):
    """A BNCF file failed validation."""


class WeightsError(FeatureExportError):
    """Backbone weights could not be resolved."""
