"""Real-time dynamics of an Ising chain with one harmonic bath per spin."""

from .config import ChainConfig, ConfigError, load_config, uniform_chain

__all__ = ["ChainConfig", "ConfigError", "load_config", "uniform_chain"]
__version__ = "0.1.0"
