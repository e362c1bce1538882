"""memsde: simulation and verification lab for SDEs with infinite exponential memory."""

__version__ = "0.1.0"
__app_name__ = "memsde"
