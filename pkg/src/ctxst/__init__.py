from .autodiff import Tensor, backward, gradient_check, no_grad, zero_grads  # noqa: F401
