from .bd import bd_metric
from .channel import ChannelSpec, awgn_transmit, bpsk_ber, transmit_bitstream
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .sweep import MissingCheckpointError, SweepResult, run_rd_sweep

__all__ = ["ChannelSpec", "CheckpointError", "ExperimentConfig", "MissingCheckpointError",
           "SweepResult", "awgn_transmit", "bd_metric", "bpsk_ber", "load_checkpoint",
           "run_rd_sweep", "save_checkpoint", "transmit_bitstream"]
