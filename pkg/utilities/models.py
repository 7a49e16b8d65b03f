""" Zoo of small differentiable image classifiers with hand-written backpropagation.

Every model maps a (C, H, W) image (or an (N, C, H, W) batch) to class logits, and exposes the
analytic gradient of the cross-entropy loss with respect to its input. The four architectures
span the convolution vs. attention divide at toy scale:

    Linear         flatten -> affine
    Mlp            flatten -> affine(64) -> ReLU -> affine
    SmallConv      conv3x3(8) -> ReLU -> conv3x3(16) -> ReLU -> global average pool -> affine
    TinyAttention  4x4 patches -> embed(32) + position -> single-head self-attention (residual)
                   -> mean pool -> affine

"""
from dataclasses import dataclass, field

import numpy as np
from sklearn.metrics import accuracy_score
from tqdm import tqdm

from utilities.numerics import (
    as_tensor, check_finite_output, cross_entropy, cross_entropy_batch, finite_diff_gradient, one_hot,
    softmax_rows,
)

ARCHITECTURES = ('Linear', 'Mlp', 'SmallConv', 'TinyAttention')
DEFAULT_INPUT_SHAPE = (3, 16, 16)
DEFAULT_NUM_CLASSES = 4

# Fixed per-pixel standardisation applied by zoo models before their first layer
ZOO_INPUT_SHIFT = 0.5
ZOO_INPUT_SCALE = 4.0

MLP_HIDDEN_UNITS = 64
CONV_CHANNELS = (8, 16)
PATCH_SIZE = 4
EMBED_DIM = 32

# Learning rates that train each architecture reliably on the synthetic blobs
DEFAULT_LEARNING_RATES = {'Linear': 0.1, 'Mlp': 0.05, 'SmallConv': 0.05, 'TinyAttention': 0.02}


@dataclass
class LabeledDataset:
    """Images (N, C, H, W) in [0, 1] with integer labels (N,)."""
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = 'dataset'

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be shaped (N, C, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.images[indices], self.labels[indices], self.num_classes, self.name)


class DifferentiableClassifier:
    """Base class for zoo models.

    Subclasses fill `self.params` in `_init_params` and implement `_forward_batch` (returning the
    logits and a cache) and `_backward_batch` (turning logit gradients into input and parameter
    gradients).

    Args:
        input_shape (tuple): (C, H, W) of accepted images.
        num_classes (int): Number of output logits (>= 2).
        model_name (str): Identifier used in reports and checkpoint file names.
        seed (int): Seed of the parameter initialisation.
        input_shift (float): Constant subtracted from every pixel before the first layer.
        input_scale (float): Factor applied after the shift.
    """
    architecture_id = None

    def __init__(self, input_shape=DEFAULT_INPUT_SHAPE, num_classes=DEFAULT_NUM_CLASSES, model_name=None, seed=0,
                 input_shift=0.0, input_scale=1.0):
        if num_classes < 2:
            raise ValueError(f"num_classes must be at least 2, got {num_classes}")
        self.input_shape = tuple(int(s) for s in input_shape)
        if len(self.input_shape) != 3:
            raise ValueError(f"input_shape must be (C, H, W), got {input_shape}")
        self.num_classes = int(num_classes)
        self.model_name = model_name if model_name is not None else self.architecture_id.lower()
        self.seed = int(seed)
        self.input_shift = float(input_shift)
        self.input_scale = float(input_scale)
        self.train_accuracy = None
        self.params = {}
        self._init_params(np.random.default_rng(self.seed))

    def __repr__(self):
        return f"{type(self).__name__}(name={self.model_name!r}, input_shape={self.input_shape}, classes={self.num_classes})"

    # ---- subclass hooks ----
    def _init_params(self, rng):
        raise NotImplementedError

    def _forward_batch(self, X):
        raise NotImplementedError

    def _backward_batch(self, cache, dZ, need_params=True):
        raise NotImplementedError

    def _relu_preactivations(self, cache):
        return []

    # ---- helpers ----
    def _as_batch(self, x):
        x = as_tensor(x, 'model input')
        single = x.ndim == 3
        X = x[None] if single else x
        if X.ndim != 4 or tuple(X.shape[1:]) != self.input_shape:
            raise ValueError(f"{self.model_name} expects input shape {self.input_shape}, got {x.shape}")
        return X, single

    def _standardize(self, X):
        return (X - self.input_shift) * self.input_scale

    # ---- public API ----
    def forward(self, x):
        """Logits for an image (numClasses,) or a batch (N, numClasses)."""
        X, single = self._as_batch(x)
        Z, _ = self._forward_batch(self._standardize(X))
        check_finite_output(Z, f"{self.model_name} forward pass")
        return Z[0] if single else Z

    def predict(self, x):
        """Predicted class index for an image, or an array of indices for a batch."""
        Z = self.forward(x)
        return np.argmax(Z, axis=-1)

    def backward(self, x, dlogits):
        """Vector-Jacobian product: gradient of <dlogits, forward(x)> with respect to x."""
        X, single = self._as_batch(x)
        dZ = np.asarray(dlogits, dtype=np.float64).reshape(len(X), self.num_classes)
        _, cache = self._forward_batch(self._standardize(X))
        dX, _ = self._backward_batch(cache, dZ, need_params=False)
        dX = dX * self.input_scale
        return dX[0] if single else dX

    def input_gradient(self, x, y):
        """Analytic gradient of cross_entropy(forward(x), y) with respect to the image x."""
        X, single = self._as_batch(x)
        if not single:
            raise ValueError("input_gradient expects a single (C, H, W) image")
        if not 0 <= int(y) < self.num_classes:
            raise ValueError(f"class index {y} out of range for {self.num_classes} classes")
        Z, cache = self._forward_batch(self._standardize(X))
        dZ = softmax_rows(Z) - one_hot(np.array([int(y)]), self.num_classes)
        dX, _ = self._backward_batch(cache, dZ, need_params=False)
        return dX[0] * self.input_scale

    def activation_pattern(self, x):
        """Boolean on/off pattern of every ReLU unit at x (empty for ReLU-free models)."""
        X, _ = self._as_batch(x)
        _, cache = self._forward_batch(self._standardize(X))
        pre = self._relu_preactivations(cache)
        if not pre:
            return np.zeros(0, dtype=bool)
        return np.concatenate([p.reshape(-1) > 0 for p in pre])

    def loss_and_parameter_gradients(self, X, Y):
        """Mean cross-entropy of a batch and its gradients with respect to every parameter."""
        X, _ = self._as_batch(X)
        Y = np.asarray(Y, dtype=np.int64)
        Z, cache = self._forward_batch(self._standardize(X))
        check_finite_output(Z, f"{self.model_name} training forward pass")
        dZ = (softmax_rows(Z) - one_hot(Y, self.num_classes)) / len(Y)
        _, grads = self._backward_batch(cache, dZ, need_params=True)
        return cross_entropy_batch(Z, Y), grads

    def copy(self):
        clone = object.__new__(type(self))
        clone.__dict__.update(self.__dict__)
        clone.params = {name: np.array(value, copy=True) for name, value in self.params.items()}
        return clone

    def freeze(self):
        """Marks every parameter array read-only."""
        for value in self.params.values():
            value.setflags(write=False)
        return self


def _he_normal(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def _relu(A):
    return np.maximum(A, 0.0)


class LinearClassifier(DifferentiableClassifier):
    """ flatten -> affine. Parameters: W (numClasses, D), b (numClasses,). """
    architecture_id = 'Linear'

    def _init_params(self, rng):
        D = int(np.prod(self.input_shape))
        self.params['W'] = rng.normal(0.0, 1.0 / np.sqrt(D), size=(self.num_classes, D))
        self.params['b'] = np.zeros(self.num_classes)

    def _forward_batch(self, X):
        F = X.reshape(len(X), -1)
        Z = F @ self.params['W'].T + self.params['b']
        return Z, {'F': F, 'shape': X.shape}

    def _backward_batch(self, cache, dZ, need_params=True):
        dX = (dZ @ self.params['W']).reshape(cache['shape'])
        grads = {}
        if need_params:
            grads['W'] = dZ.T @ cache['F']
            grads['b'] = dZ.sum(axis=0)
        return dX, grads


class MlpClassifier(DifferentiableClassifier):
    """ flatten -> affine(64) -> ReLU -> affine. """
    architecture_id = 'Mlp'

    def _init_params(self, rng):
        D = int(np.prod(self.input_shape))
        self.params['W1'] = _he_normal(rng, (MLP_HIDDEN_UNITS, D), D)
        self.params['b1'] = np.zeros(MLP_HIDDEN_UNITS)
        self.params['W2'] = rng.normal(0.0, 1.0 / np.sqrt(MLP_HIDDEN_UNITS), size=(self.num_classes, MLP_HIDDEN_UNITS))
        self.params['b2'] = np.zeros(self.num_classes)

    def _forward_batch(self, X):
        F = X.reshape(len(X), -1)
        A1 = F @ self.params['W1'].T + self.params['b1']
        H1 = _relu(A1)
        Z = H1 @ self.params['W2'].T + self.params['b2']
        return Z, {'F': F, 'A1': A1, 'H1': H1, 'shape': X.shape}

    def _backward_batch(self, cache, dZ, need_params=True):
        dH1 = dZ @ self.params['W2']
        dA1 = dH1 * (cache['A1'] > 0)
        dX = (dA1 @ self.params['W1']).reshape(cache['shape'])
        grads = {}
        if need_params:
            grads['W2'] = dZ.T @ cache['H1']
            grads['b2'] = dZ.sum(axis=0)
            grads['W1'] = dA1.T @ cache['F']
            grads['b1'] = dA1.sum(axis=0)
        return dX, grads

    def _relu_preactivations(self, cache):
        return [cache['A1']]


def _im2col(X):
    """(N, C, H, W) -> (N, H*W, C*9) columns of 3x3 neighbourhoods with zero padding 1."""
    N, C, H, W = X.shape
    padded = np.pad(X, ((0, 0), (0, 0), (1, 1), (1, 1)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(2, 3))  # (N, C, H, W, 3, 3)
    return windows.transpose(0, 2, 3, 1, 4, 5).reshape(N, H * W, C * 9)


def _col2im(dcols, shape):
    """Adjoint of _im2col: scatters (N, H*W, C*9) column gradients back onto (N, C, H, W)."""
    N, C, H, W = shape
    dcols = dcols.reshape(N, H, W, C, 3, 3)
    dpadded = np.zeros((N, C, H + 2, W + 2))
    for i in range(3):
        for j in range(3):
            dpadded[:, :, i:i + H, j:j + W] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dpadded[:, :, 1:-1, 1:-1]


def _conv_forward(X, kernel, bias):
    N, _, H, W = X.shape
    cols = _im2col(X)
    out = cols @ kernel.reshape(len(kernel), -1).T + bias  # (N, H*W, F)
    return out.transpose(0, 2, 1).reshape(N, len(kernel), H, W), cols


def _conv_backward(dOut, cols, kernel, input_shape, need_params):
    N, F, H, W = dOut.shape
    dOut_rows = dOut.reshape(N, F, H * W).transpose(0, 2, 1)  # (N, H*W, F)
    dX = _col2im(dOut_rows @ kernel.reshape(F, -1), input_shape)
    grads = None
    if need_params:
        dkernel = np.einsum('npf,npk->fk', dOut_rows, cols).reshape(kernel.shape)
        dbias = dOut_rows.sum(axis=(0, 1))
        grads = (dkernel, dbias)
    return dX, grads


class SmallConvClassifier(DifferentiableClassifier):
    """ conv3x3(8) -> ReLU -> conv3x3(16) -> ReLU -> global average pool -> affine. """
    architecture_id = 'SmallConv'

    def _init_params(self, rng):
        C = self.input_shape[0]
        c1, c2 = CONV_CHANNELS
        self.params['K1'] = _he_normal(rng, (c1, C, 3, 3), C * 9)
        self.params['c1'] = np.zeros(c1)
        self.params['K2'] = _he_normal(rng, (c2, c1, 3, 3), c1 * 9)
        self.params['c2'] = np.zeros(c2)
        self.params['Wh'] = rng.normal(0.0, 1.0 / np.sqrt(c2), size=(self.num_classes, c2))
        self.params['bh'] = np.zeros(self.num_classes)

    def _forward_batch(self, X):
        A1, cols1 = _conv_forward(X, self.params['K1'], self.params['c1'])
        H1 = _relu(A1)
        A2, cols2 = _conv_forward(H1, self.params['K2'], self.params['c2'])
        H2 = _relu(A2)
        pooled = H2.mean(axis=(2, 3))
        Z = pooled @ self.params['Wh'].T + self.params['bh']
        cache = {'shape': X.shape, 'cols1': cols1, 'A1': A1, 'H1': H1, 'cols2': cols2, 'A2': A2, 'pooled': pooled}
        return Z, cache

    def _backward_batch(self, cache, dZ, need_params=True):
        N, _, H, W = cache['shape']
        grads = {}
        dpooled = dZ @ self.params['Wh']
        dA2 = (dpooled[:, :, None, None] / (H * W)) * (cache['A2'] > 0)
        dH1, conv2_grads = _conv_backward(dA2, cache['cols2'], self.params['K2'], cache['H1'].shape, need_params)
        dA1 = dH1 * (cache['A1'] > 0)
        dX, conv1_grads = _conv_backward(dA1, cache['cols1'], self.params['K1'], cache['shape'], need_params)
        if need_params:
            grads['Wh'] = dZ.T @ cache['pooled']
            grads['bh'] = dZ.sum(axis=0)
            grads['K2'], grads['c2'] = conv2_grads
            grads['K1'], grads['c1'] = conv1_grads
        return dX, grads

    def _relu_preactivations(self, cache):
        return [cache['A1'], cache['A2']]


def _patchify(X, patch):
    N, C, H, W = X.shape
    blocks = X.reshape(N, C, H // patch, patch, W // patch, patch)
    return blocks.transpose(0, 2, 4, 1, 3, 5).reshape(N, (H // patch) * (W // patch), C * patch * patch)


def _unpatchify(P, shape, patch):
    N, C, H, W = shape
    blocks = P.reshape(N, H // patch, W // patch, C, patch, patch)
    return blocks.transpose(0, 3, 1, 4, 2, 5).reshape(N, C, H, W)


class TinyAttentionClassifier(DifferentiableClassifier):
    """ 4x4 patches -> linear embed(32) + learned positions -> single-head self-attention with a
    residual connection -> mean pool over tokens -> affine head. No normalisation layers.
    """
    architecture_id = 'TinyAttention'

    def _init_params(self, rng):
        C, H, W = self.input_shape
        if H % PATCH_SIZE or W % PATCH_SIZE:
            raise ValueError(f"TinyAttention needs H and W divisible by {PATCH_SIZE}, got {self.input_shape}")
        tokens = (H // PATCH_SIZE) * (W // PATCH_SIZE)
        patch_dim = C * PATCH_SIZE * PATCH_SIZE
        self.params['We'] = rng.normal(0.0, 1.0 / np.sqrt(patch_dim), size=(patch_dim, EMBED_DIM))
        self.params['be'] = np.zeros(EMBED_DIM)
        self.params['pos'] = rng.normal(0.0, 0.02, size=(tokens, EMBED_DIM))
        for name in ('Wq', 'Wk', 'Wv'):
            self.params[name] = rng.normal(0.0, 1.0 / np.sqrt(EMBED_DIM), size=(EMBED_DIM, EMBED_DIM))
        self.params['Wh'] = rng.normal(0.0, 1.0 / np.sqrt(EMBED_DIM), size=(self.num_classes, EMBED_DIM))
        self.params['bh'] = np.zeros(self.num_classes)

    def _forward_batch(self, X):
        P = _patchify(X, PATCH_SIZE)
        E = P @ self.params['We'] + self.params['be'] + self.params['pos']
        Q = E @ self.params['Wq']
        K = E @ self.params['Wk']
        V = E @ self.params['Wv']
        S = Q @ K.transpose(0, 2, 1) / np.sqrt(EMBED_DIM)
        A = softmax_rows(S)
        Hs = E + A @ V
        pooled = Hs.mean(axis=1)
        Z = pooled @ self.params['Wh'].T + self.params['bh']
        cache = {'shape': X.shape, 'P': P, 'E': E, 'Q': Q, 'K': K, 'V': V, 'A': A, 'pooled': pooled}
        return Z, cache

    def _backward_batch(self, cache, dZ, need_params=True):
        E, Q, K, V, A = cache['E'], cache['Q'], cache['K'], cache['V'], cache['A']
        tokens = E.shape[1]
        grads = {}

        dpooled = dZ @ self.params['Wh']
        dHs = np.repeat(dpooled[:, None, :] / tokens, tokens, axis=1)
        dE = dHs.copy()
        dA = dHs @ V.transpose(0, 2, 1)
        dV = A.transpose(0, 2, 1) @ dHs
        dS = A * (dA - np.sum(dA * A, axis=-1, keepdims=True)) / np.sqrt(EMBED_DIM)
        dQ = dS @ K
        dK = dS.transpose(0, 2, 1) @ Q
        dE += dQ @ self.params['Wq'].T + dK @ self.params['Wk'].T + dV @ self.params['Wv'].T
        dX = _unpatchify(dE @ self.params['We'].T, cache['shape'], PATCH_SIZE)

        if need_params:
            grads['Wh'] = dZ.T @ cache['pooled']
            grads['bh'] = dZ.sum(axis=0)
            grads['Wq'] = np.einsum('ntd,nte->de', E, dQ)
            grads['Wk'] = np.einsum('ntd,nte->de', E, dK)
            grads['Wv'] = np.einsum('ntd,nte->de', E, dV)
            grads['We'] = np.einsum('ntp,nte->pe', cache['P'], dE)
            grads['be'] = dE.sum(axis=(0, 1))
            grads['pos'] = dE.sum(axis=0)
        return dX, grads


MODEL_CLASSES = {cls.architecture_id: cls for cls in
                 (LinearClassifier, MlpClassifier, SmallConvClassifier, TinyAttentionClassifier)}


def create_model(architecture_id, input_shape=DEFAULT_INPUT_SHAPE, num_classes=DEFAULT_NUM_CLASSES, model_name=None,
                 seed=0, input_shift=0.0, input_scale=1.0):
    """Instantiates a freshly initialised zoo model of the named architecture."""
    if architecture_id not in MODEL_CLASSES:
        raise ValueError(f"Unknown architecture '{architecture_id}'. Expected one of {ARCHITECTURES}")
    return MODEL_CLASSES[architecture_id](input_shape, num_classes, model_name, seed, input_shift, input_scale)


def forward(model, x):
    return model.forward(x)


def input_gradient(model, x, y):
    return model.input_gradient(x, y)


def parse_zoo_entry(entry):
    """Splits a zoo entry 'Architecture' or 'Architecture:name' into (architecture, name or None)."""
    architecture, _, name = str(entry).strip().partition(':')
    return architecture.strip(), (name.strip() or None)


def build_zoo(spec, seed, input_shape=DEFAULT_INPUT_SHAPE, num_classes=DEFAULT_NUM_CLASSES, name_suffix='',
              standardize=True):
    """Builds and initialises one model per zoo entry.

    Each model gets its own initialisation seed spawned from the master seed, so models of the same
    architecture still start from different parameters. Duplicate names get an index suffix.

    Args:
        spec (list): Architecture ids, optionally with a name ('SmallConv:conv_b').
        seed (int): Master seed.
        input_shape (tuple): (C, H, W) of the images.
        num_classes (int): Number of classes.
        name_suffix (str): Appended to every generated model name (e.g. '_reseed').
        standardize (bool): Whether models standardise pixels with the zoo shift/scale.

    Returns:
        models: List of DifferentiableClassifier.
    """
    entries = [parse_zoo_entry(entry) for entry in spec]
    if not entries:
        raise ValueError("Zoo specification must name at least one architecture")
    for architecture, _ in entries:
        if architecture not in MODEL_CLASSES:
            raise ValueError(f"Unknown architecture '{architecture}'. Expected one of {ARCHITECTURES}")

    child_seeds = np.random.SeedSequence(seed).spawn(len(entries))
    shift, scale = (ZOO_INPUT_SHIFT, ZOO_INPUT_SCALE) if standardize else (0.0, 1.0)
    models, used_names = [], set()
    for (architecture, name), child in zip(entries, child_seeds):
        if name is None:
            name = architecture.lower() + name_suffix
        unique_name, index = name, 1
        while unique_name in used_names:
            unique_name = f"{name}_{index}"
            index += 1
        used_names.add(unique_name)
        model_seed = int(child.generate_state(1)[0])
        models.append(create_model(architecture, input_shape, num_classes, unique_name, model_seed, shift, scale))
    return models


def train_toy(model, data, epochs, learning_rate=None, seed=0, batch_size=32, verbose=False):
    """Trains a copy of the model with plain mini-batch gradient descent on the cross-entropy loss.

    Args:
        model: DifferentiableClassifier to start from (left untouched).
        data: LabeledDataset matching the model input shape.
        epochs (int): Number of passes over the data (>= 1).
        learning_rate (float): Step size; the architecture default when None.
        seed (int): Seed of the shuffling order.
        batch_size (int): Mini-batch size.
        verbose (bool): Print per-epoch loss.

    Returns:
        trained: Frozen copy of the model with `train_accuracy` set.
    """
    if len(data) == 0:
        raise ValueError("Cannot train on an empty dataset")
    if epochs < 1:
        raise ValueError(f"epochs must be at least 1, got {epochs}")
    if learning_rate is None:
        learning_rate = DEFAULT_LEARNING_RATES[model.architecture_id]

    trained = model.copy()
    rng = np.random.default_rng(seed)
    n = len(data)
    epoch_iter = tqdm(range(epochs), desc=f"train {trained.model_name}", disable=not verbose)
    for epoch in epoch_iter:
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, batch_size):
            batch = order[start:start + batch_size]
            loss, grads = trained.loss_and_parameter_gradients(data.images[batch], data.labels[batch])
            for name, grad in grads.items():
                trained.params[name] = trained.params[name] - learning_rate * grad
            epoch_loss += loss * len(batch)
        if verbose:
            epoch_iter.set_postfix(loss=f"{epoch_loss / n:.4f}")

    trained.train_accuracy = float(accuracy_score(data.labels, trained.predict(data.images)))
    if verbose:
        print(f"| {trained.model_name}: final training accuracy {trained.train_accuracy * 100:.2f}%")
    return trained.freeze()


def train_zoo(models, data, epochs, seed=0, learning_rates=None, verbose=False):
    """Trains every model of a zoo on the same data. Returns the list of trained copies."""
    learning_rates = learning_rates or {}
    child_seeds = np.random.SeedSequence(seed).spawn(len(models))
    trained = []
    for model, child in zip(models, child_seeds):
        lr = learning_rates.get(model.architecture_id)
        trained.append(train_toy(model, data, epochs, lr, int(child.generate_state(1)[0]), verbose=verbose))
    return trained


def accuracy(model, data):
    """Fraction of correctly classified images."""
    if len(data) == 0:
        return 0.0
    return float(accuracy_score(data.labels, model.predict(data.images)))


def gradient_check(model, x, y, h=1e-5):
    """Compares the analytic input gradient with central finite differences.

    Returns:
        analytic: Analytic gradient.
        numeric: Finite-difference gradient.
        smooth_mask: False for elements whose +-h stencil flips a ReLU unit; those differences
            straddle a kink and are not comparable.
    """
    x = np.array(x, dtype=np.float64)
    analytic = model.input_gradient(x, y)
    numeric = finite_diff_gradient(lambda z: cross_entropy(model.forward(z), y), x, h)

    base_pattern = model.activation_pattern(x)
    smooth_mask = np.ones(x.size, dtype=bool)
    if base_pattern.size:
        flat = x.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            for offset in (h, -h):
                flat[i] = original + offset
                if not np.array_equal(model.activation_pattern(x), base_pattern):
                    smooth_mask[i] = False
            flat[i] = original
    return analytic, numeric, smooth_mask.reshape(x.shape)
