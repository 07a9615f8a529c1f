"""Static disciplines for reasoning about effects: reference capabilities,
effect systems, rely-guarantee reference splitting, and fixed object layout."""

__version__ = "0.1.0"
