"""Freeze-mask operations: gradient masking, union update and end-of-dataset finalization."""
import logging

import numpy as np

from src.core.errors import DimensionError
from src.core.tensor import Tensor
from src.models.network import Network

logger = logging.getLogger(__name__)


def apply_freeze(grad_w: Tensor, freeze_mask: Tensor) -> Tensor:
    """Zero the weight gradient wherever M^f = 1."""
    if grad_w.shape != freeze_mask.shape:
        raise DimensionError(f"gradient {grad_w.shape} does not match freeze mask {freeze_mask.shape}")
    return np.where(freeze_mask, np.zeros((), dtype=grad_w.dtype), grad_w)


def update_freeze_mask(freeze_mask: Tensor, prune_mask: Tensor) -> Tensor:
    """M^f' = M^f OR M^p."""
    if freeze_mask.shape != prune_mask.shape:
        raise DimensionError(f"freeze mask {freeze_mask.shape} does not match prune mask {prune_mask.shape}")
    return np.logical_or(freeze_mask, prune_mask)


def update_freeze_masks(network: Network) -> None:
    for layer in network.masked_layers():
        layer.refresh_mask()
        layer.freeze_mask = update_freeze_mask(layer.freeze_mask, layer.prune_mask)


def finalize_dataset(network: Network, dataset_idx: int, freeze_batchnorm: bool = True,
                     freeze_biases: bool = True) -> Network:
    """Hard-zero dormant weights so mask-free inference equals masked inference.

    Batch-norm layers and the biases of maskable layers are frozen once the
    first dataset has been finalized; later datasets can only grow free weights.
    """
    zeroed = 0
    for layer in network.masked_layers():
        dormant = ~layer.active_mask()
        zeroed += int(np.count_nonzero(layer.weight[dormant]))
        layer.weight[dormant] = 0
    if freeze_batchnorm and dataset_idx == 0:
        for bn in network.batchnorm_layers():
            bn.frozen = True
    if freeze_biases and dataset_idx == 0:
        for layer in network.masked_layers():
            layer.bias_frozen = True
    logger.info(f"Dataset {dataset_idx} finalized: {zeroed} dormant weights set to zero.")
    return network
