import numpy as np
from tensor import (
    ArrayLike,
    Tensor,
    as_tensor,
    clamp,
    log,
    log_softmax_rows,
    power,
    smooth_l1,
    tensor_mean,
    tensor_sum,
)

PROBABILITY_EPS = 1e-7


def focal_loss(
    probs: ArrayLike,
    targets: ArrayLike,
    alpha: float = 0.25,
    gamma: float = 2.0,
    eps: float = PROBABILITY_EPS,
) -> Tensor:
    """
    Mean focal loss over every element.

    Args:
        probs: Predicted probabilities (already through a sigmoid)
        targets: 0/1 array of the same shape
        alpha: Weight of positives; negatives get 1 - alpha
        gamma: Focusing exponent on (1 - p_t)
        eps: Probabilities are clamped to [eps, 1 - eps]

    Returns:
        Scalar tensor
    """
    probs = as_tensor(probs)
    target = np.broadcast_to(np.asarray(as_tensor(targets).data), probs.shape)
    p = clamp(probs, eps, 1.0 - eps)
    p_t = p * target + (1.0 - p) * (1.0 - target)
    alpha_t = np.where(target > 0.5, alpha, 1.0 - alpha)
    per_element = -(power(1.0 - p_t, gamma) * log(p_t)) * alpha_t
    return tensor_mean(per_element)


def binary_cross_entropy(
    probs: ArrayLike, targets: ArrayLike, eps: float = PROBABILITY_EPS
) -> Tensor:
    probs = as_tensor(probs)
    target = np.broadcast_to(np.asarray(as_tensor(targets).data), probs.shape)
    p = clamp(probs, eps, 1.0 - eps)
    return -tensor_mean(log(p) * target + log(1.0 - p) * (1.0 - target))


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of n×k logits against n integer labels"""
    labels = np.asarray(labels, dtype=int)
    one_hot = np.zeros(logits.shape)
    one_hot[np.arange(len(labels)), labels] = 1.0
    return -tensor_sum(log_softmax_rows(logits) * one_hot) * (1.0 / max(len(labels), 1))


def smooth_l1_loss(
    predicted: Tensor, target: np.ndarray, normalizer: float, beta: float = 1.0
) -> Tensor:
    """Summed smooth-L1 of (predicted − target) divided by ``normalizer``"""
    return tensor_sum(smooth_l1(predicted - target, beta)) * (1.0 / max(normalizer, 1.0))
