"""Exception types raised across the package."""


class GraphFormatError(ValueError):
    """A dataset bundle or graph blob could not be parsed."""


class UncoveredCategoryError(LookupError):
    """A target category has no trigger in the pool."""

    def __init__(self, categories):
        self.categories = sorted(int(c) for c in categories)
        super().__init__(f"uncovered target category: {self.categories}")


class ConfigError(ValueError):
    """Experiment configuration failed validation."""
