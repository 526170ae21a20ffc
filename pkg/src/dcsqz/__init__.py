"""Phase-resolved photon-number noise of displaced Kerr-squeezed dual-comb light."""

__version__ = "0.1.0"
