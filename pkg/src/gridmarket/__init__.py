"""Structure-preserving power network coupled to distributed dynamic pricing."""
from .network import NetworkConfig, load_config, load_config_file

__all__ = ["NetworkConfig", "load_config", "load_config_file"]
__version__ = "0.1.0"
