# numerics package initialization
from .tensor import GradTape, Node, Parameter, SeqTensor, as_param, as_seq
from .ops import (avgpool1d, conv1d, layer_norm, mask_rows, maxpool1d, relu,
                  self_attention, softmax, subsample)

__all__ = [
    'GradTape', 'Node', 'Parameter', 'SeqTensor', 'as_param', 'as_seq',
    'avgpool1d', 'conv1d', 'layer_norm', 'mask_rows', 'maxpool1d', 'relu',
    'self_attention', 'softmax', 'subsample',
]
