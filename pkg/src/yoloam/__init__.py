from .tensor import Tensor, no_grad
__version__ = '0.1.0'
