"""risbeam - robust hybrid beamforming for RIS-aided mmWave links under random blockages."""

__version__ = "0.1.0"
