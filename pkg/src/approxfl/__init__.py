"""Energy-aware heterogeneous federated learning on emulated approximate accelerators."""
from .accel import AcceleratorConfig, EnergyLedger, EnergyTable, accelerator, minibatch_energy
from .arith import FloatFormat, MultiplierSpec, approx_multiply, round_to_format
from .config import RunConfig, load_config

__all__ = ["AcceleratorConfig", "EnergyLedger", "EnergyTable", "FloatFormat", "MultiplierSpec", "RunConfig",
           "accelerator", "approx_multiply", "load_config", "minibatch_energy", "round_to_format"]
__version__ = "0.1.0"
