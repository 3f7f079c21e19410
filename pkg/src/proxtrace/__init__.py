"""BLE proximity classification and exposure-notification workbench."""

__version__ = "0.1.0"
