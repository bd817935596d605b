"""Side-channel-aware fuzzing feedback on simulated power traces."""
from .device import DeviceModel, PowerTrace, default_device, execute, synthesize_trace, theoretical_scores
from .targets import Program, aes_target, generate_synthetic_program, static_transition_count

__version__ = "0.1.0"

__all__ = [
    "DeviceModel",
    "PowerTrace",
    "Program",
    "aes_target",
    "default_device",
    "execute",
    "generate_synthetic_program",
    "static_transition_count",
    "synthesize_trace",
    "theoretical_scores",
]
