"""Retention-based encoder-decoder sequence model for cooperative multi-agent RL."""

from sable.tensor import Tensor, AllocationMeter, backward, no_grad

__all__ = ["Tensor", "AllocationMeter", "backward", "no_grad"]
