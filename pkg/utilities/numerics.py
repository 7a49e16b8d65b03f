""" Numerical primitives shared by the models, the attacks and the evaluation harness.

Tensors are plain float64 numpy arrays in row-major order. Images are (C, H, W) arrays with
pixel values in [0, 1]. Every function here returns a new array and leaves its inputs untouched.

"""
import numpy as np
from scipy.special import logsumexp, softmax as _scipy_softmax


def as_tensor(values, name='tensor'):
    """Converts the input to a float64 array and rejects NaN/Inf entries.

    Args:
        values: Array-like input.
        name: Name used in the error message.

    Returns:
        tensor: float64 numpy array (a copy when a conversion was needed).
    """
    tensor = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(tensor)):
        raise ValueError(f"{name} contains non-finite values")
    return tensor


def softmax(v):
    """Computes the softmax of a real vector.

    The max entry is subtracted before exponentiation, so large inputs (such as adversarial
    ratios scaled by beta) do not overflow.

    Args:
        v: Non-empty 1-D array of finite reals.

    Returns:
        probabilities: 1-D array on the probability simplex.
    """
    v = as_tensor(v, 'softmax input')
    if v.ndim != 1 or v.size == 0:
        raise ValueError(f"softmax expects a non-empty vector, got shape {v.shape}")
    return _scipy_softmax(v)


def log_softmax_rows(Z):
    """Row-wise log-softmax of a (N, numClasses) logits matrix."""
    return Z - logsumexp(Z, axis=-1, keepdims=True)


def softmax_rows(Z):
    """Row-wise softmax of a (N, numClasses) logits matrix."""
    return _scipy_softmax(Z, axis=-1)


def one_hot(y, num_classes):
    """Returns a one-hot float64 vector (or matrix for an array of labels)."""
    y = np.asarray(y)
    encoded = np.zeros(y.shape + (num_classes,), dtype=np.float64)
    np.put_along_axis(encoded, y[..., None], 1.0, axis=-1)
    return encoded


def cross_entropy(logits, y):
    """Negative log-likelihood of class y under softmax(logits).

    Args:
        logits: 1-D array of at least two finite logits.
        y: Ground-truth class index.

    Returns:
        loss: Non-negative float.
    """
    logits = as_tensor(logits, 'logits')
    if logits.ndim != 1 or logits.size < 2:
        raise ValueError(f"logits must be a vector with at least 2 classes, got shape {logits.shape}")
    if not 0 <= int(y) < logits.size:
        raise ValueError(f"class index {y} out of range for {logits.size} classes")
    return max(float(logsumexp(logits) - logits[int(y)]), 0.0)


def cross_entropy_batch(Z, Y):
    """Mean cross-entropy of a logits batch (N, numClasses) against integer labels (N,)."""
    Y = np.asarray(Y, dtype=np.int64)
    log_probs = log_softmax_rows(Z)
    return float(-np.mean(log_probs[np.arange(len(Y)), Y]))


def sign_tensor(t):
    """Elementwise sign (-1, 0, +1) of a finite tensor."""
    return np.sign(as_tensor(t, 'sign input'))


def channel_cosine(a, b, p, q):
    """Cosine similarity of the channel vectors a[:, p, q] and b[:, p, q].

    Both vectors zero counts as agreement (1.0). Exactly one zero vector carries no direction,
    so the similarity is 0.0.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 3:
        raise ValueError(f"channel_cosine expects two (C, H, W) tensors of equal shape, got {a.shape} and {b.shape}")
    u = a[:, p, q]
    v = b[:, p, q]
    norm_u = np.linalg.norm(u)
    norm_v = np.linalg.norm(v)
    if norm_u == 0.0 and norm_v == 0.0:
        return 1.0
    if norm_u == 0.0 or norm_v == 0.0:
        return 0.0
    return float(np.clip(np.dot(u, v) / (norm_u * norm_v), -1.0, 1.0))


def channel_cosine_map(a, b):
    """Vectorised channel_cosine over every (p, q) position. Returns an (H, W) map in [-1, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 3:
        raise ValueError(f"channel_cosine_map expects two (C, H, W) tensors of equal shape, got {a.shape} and {b.shape}")
    norm_a = np.sqrt(np.sum(a * a, axis=0))
    norm_b = np.sqrt(np.sum(b * b, axis=0))
    dot = np.sum(a * b, axis=0)

    both_zero = (norm_a == 0.0) & (norm_b == 0.0)
    one_zero = (norm_a == 0.0) ^ (norm_b == 0.0)
    denom = np.where((norm_a == 0.0) | (norm_b == 0.0), 1.0, norm_a * norm_b)
    cos_map = np.clip(dot / denom, -1.0, 1.0)
    cos_map[both_zero] = 1.0
    cos_map[one_zero] = 0.0
    return cos_map


def clip_to_unit(x):
    """Clamps every element into the valid pixel range [0, 1]."""
    return np.clip(x, 0.0, 1.0)


def clip_to_ball(x0, x, epsilon):
    """Projects x onto the intersection of the l-inf ball around x0 and the unit pixel box.

    Args:
        x0: Original image.
        x: Candidate image of the same shape.
        epsilon: Non-negative l-inf budget.

    Returns:
        Elementwise nearest point r with |r - x0| <= epsilon and 0 <= r <= 1.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x0.shape != x.shape:
        raise ValueError(f"shape mismatch: original {x0.shape} vs candidate {x.shape}")
    if epsilon < 0:
        raise ValueError(f"epsilon must be non-negative, got {epsilon}")
    lower = np.maximum(x0 - epsilon, 0.0)
    upper = np.minimum(x0 + epsilon, 1.0)
    return np.clip(x, lower, upper)


def finite_diff_gradient(loss_fn, x, h=1e-5):
    """Central-difference gradient of a scalar function of an image.

    Args:
        loss_fn: Callable mapping an array shaped like x to a float.
        x: Evaluation point.
        h: Step size (> 0).

    Returns:
        gradient: Array shaped like x.
    """
    if h <= 0:
        raise ValueError(f"step size must be positive, got {h}")
    x = np.array(x, dtype=np.float64)
    gradient = np.zeros_like(x)
    flat_x = x.reshape(-1)
    flat_grad = gradient.reshape(-1)
    for i in range(flat_x.size):
        original = flat_x[i]
        flat_x[i] = original + h
        loss_plus = loss_fn(x)
        flat_x[i] = original - h
        loss_minus = loss_fn(x)
        flat_x[i] = original
        flat_grad[i] = (loss_plus - loss_minus) / (2.0 * h)
    return gradient


def relative_error(analytic, numeric, mask=None, floor=1e-6):
    """Largest elementwise relative error |a - n| / max(|a|, |n|) over the compared elements.

    Elements where both magnitudes are below `floor`, or where `mask` is False, are skipped.
    Returns 0.0 when nothing is compared.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    compared = scale > floor
    if mask is not None:
        compared &= np.asarray(mask, dtype=bool)
    if not np.any(compared):
        return 0.0
    return float(np.max(np.abs(analytic - numeric)[compared] / scale[compared]))


def check_finite_output(values, what):
    """Raises NumericalError when a computed result contains NaN/Inf."""
    if not np.all(np.isfinite(values)):
        raise NumericalError(f"{what} produced non-finite values")
    return values


class NumericalError(Exception):
    """Exception raised when a computation produces NaN or Inf values where finite results are
    required (diverging training, overflowing logits).
    """
