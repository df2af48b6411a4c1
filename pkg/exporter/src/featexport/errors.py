class ExportUsageError(ValueError):
    """Caller mistake: bad manifest, bad flag, unmappable word."""


class ExportDataError(ValueError):
    """Input data problem: missing folders, no readable images, bad model dir."""
