"""Proximity-gated IoT data sharing driven by mutual BLE RSSI readings."""

__version__ = "0.1.0"
