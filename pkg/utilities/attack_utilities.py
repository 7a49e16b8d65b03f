""" Single-model gradient-sign attacks and the update rules shared with the ensemble attacks.

Base attacks:
    fgsm      one step of size epsilon
    ifgsm     T steps of size alpha, projected back onto the epsilon ball after each step
    mifgsm    ifgsm stepping along an l1-normalised momentum accumulator
    di2fgsm   ifgsm whose gradients are taken on a randomly resized and padded copy of the input

"""
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from utilities.numerics import clip_to_ball, clip_to_unit, sign_tensor

BASE_ATTACKS = ('fgsm', 'ifgsm', 'mifgsm', 'di2fgsm')

# Below this l1 norm the momentum update uses the raw gradient
MOMENTUM_NORM_GUARD = 1e-12


@dataclass(frozen=True)
class AttackConfig:
    """Hyperparameters of every attack in the toolbox.

    Args:
        epsilon (float): l-inf perturbation budget, in (0, 1).
        alpha (float): Step size of the iterative attacks, 0 < alpha <= epsilon.
        iterations (int): Number of iterations T (>= 1).
        beta (float): Temperature of the adaptive ensemble weighting.
        eta (float): Disparity threshold of the gradient filter, in [-1, 1].
        mu (float): Momentum decay (>= 0).
        di_probability (float): Probability that the diverse-input transform is applied at a step.
        di_max_enlarge (float): Largest enlargement factor of the diverse-input transform (>= 1).
        gamma (float): Denominator guard of the attack success rate (> 0).
        seed (int): Seed of the random transform streams.
    """
    epsilon: float = 8 / 255
    alpha: float = 2 / 255
    iterations: int = 20
    beta: float = 10.0
    eta: float = -0.3
    mu: float = 1.0
    di_probability: float = 0.5
    di_max_enlarge: float = 1.1
    gamma: float = 1e-12
    seed: int = 0

    def problems(self):
        """Yields (field name, message) for every constraint the configuration violates."""
        if not 0.0 < self.epsilon < 1.0:
            yield 'epsilon', f"epsilon must lie in (0, 1), got {self.epsilon}"
        if not 0.0 < self.alpha <= self.epsilon:
            yield 'alpha', f"alpha must satisfy 0 < alpha <= epsilon ({self.epsilon}), got {self.alpha}"
        if self.iterations < 1:
            yield 'iterations', f"iterations must be at least 1, got {self.iterations}"
        if not -1.0 <= self.eta <= 1.0:
            yield 'eta', f"eta must lie in [-1, 1], got {self.eta}"
        if self.mu < 0.0:
            yield 'mu', f"mu must be non-negative, got {self.mu}"
        if not 0.0 <= self.di_probability <= 1.0:
            yield 'di_probability', f"di_probability must lie in [0, 1], got {self.di_probability}"
        if self.di_max_enlarge < 1.0:
            yield 'di_max_enlarge', f"di_max_enlarge must be at least 1, got {self.di_max_enlarge}"
        if self.gamma <= 0.0:
            yield 'gamma', f"gamma must be positive, got {self.gamma}"

    def validate(self):
        for _, message in self.problems():
            raise ValueError(message)
        return self

    def replace(self, **changes):
        return replace(self, **changes)

    def step_schedule(self, base_attack):
        """(number of steps, step size) of a base attack. FGSM is a single step of size epsilon."""
        check_base_attack(base_attack)
        if base_attack == 'fgsm':
            return 1, self.epsilon
        return self.iterations, self.alpha

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class AttackState:
    """Current iterate of an attack run. `t` counts from 1 and the momentum starts at zero."""
    x0: np.ndarray
    x_adv: np.ndarray
    t: int = 1
    momentum: np.ndarray = field(default=None)

    @classmethod
    def initial(cls, x):
        x = np.array(x, dtype=np.float64)
        return cls(x0=x, x_adv=x.copy(), t=1, momentum=np.zeros_like(x))


def check_base_attack(base_attack):
    if base_attack not in BASE_ATTACKS:
        raise ValueError(f"Unknown base attack '{base_attack}'. Expected one of {BASE_ATTACKS}")
    return base_attack


def make_rng(seed, stream=0):
    """Counter-based random stream for one attack run, independent of every other (seed, stream) pair."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(stream)])))


def iter_step(state, g, cfg, step_size=None):
    """Takes one signed step along g and projects onto the epsilon ball and the pixel range."""
    g = np.asarray(g, dtype=np.float64)
    if g.shape != state.x_adv.shape:
        raise ValueError(f"gradient shape {g.shape} does not match image shape {state.x_adv.shape}")
    step_size = cfg.alpha if step_size is None else step_size
    x_next = clip_to_ball(state.x0, state.x_adv + step_size * sign_tensor(g), cfg.epsilon)
    return replace(state, x_adv=x_next, t=state.t + 1)


def momentum_update(state, g, cfg):
    """Returns mu * momentum + g / ||g||_1 (the raw g when its l1 norm is below the guard)."""
    g = np.asarray(g, dtype=np.float64)
    norm = float(np.sum(np.abs(g)))
    normalized = g / norm if norm >= MOMENTUM_NORM_GUARD else g
    return cfg.mu * state.momentum + normalized


def base_step(state, g, cfg, base_attack):
    """Applies the update rule of a base attack to an (ensemble) gradient."""
    _, step_size = cfg.step_schedule(base_attack)
    if base_attack == 'mifgsm':
        momentum = momentum_update(state, g, cfg)
        return iter_step(replace(state, momentum=momentum), momentum, cfg, step_size)
    return iter_step(state, g, cfg, step_size)


# ---------------------------------------------------------------------------------------------
# Diverse inputs
# ---------------------------------------------------------------------------------------------

def _nearest_indices(out_size, in_size):
    return (np.arange(out_size) * in_size) // out_size


def sample_diverse_input_map(image_shape, cfg, rng):
    """Draws one random resize-and-pad transform.

    The image is enlarged by nearest neighbour to rnd x rnd_w with rnd drawn uniformly from
    [H, floor(H * di_max_enlarge)], placed at a random offset on a zero canvas of the largest size,
    and the canvas is resized back to (H, W) by nearest neighbour.

    Returns:
        source: (H * W,) flat source pixel of every output pixel, -1 where the output is padding;
            None when the transform is skipped for this step.
    """
    _, H, W = image_shape
    if rng.random() >= cfg.di_probability:
        return None
    canvas_h = int(np.floor(H * cfg.di_max_enlarge))
    canvas_w = int(np.floor(W * cfg.di_max_enlarge))
    rnd_h = int(rng.integers(H, canvas_h, endpoint=True))
    rnd_w = min(canvas_w, max(W, (rnd_h * W) // H))
    top = int(rng.integers(0, canvas_h - rnd_h, endpoint=True))
    left = int(rng.integers(0, canvas_w - rnd_w, endpoint=True))

    rows = _nearest_indices(H, canvas_h) - top
    cols = _nearest_indices(W, canvas_w) - left
    inside = ((rows >= 0) & (rows < rnd_h))[:, None] & ((cols >= 0) & (cols < rnd_w))[None, :]
    src_rows = _nearest_indices(rnd_h, H)[np.clip(rows, 0, rnd_h - 1)]
    src_cols = _nearest_indices(rnd_w, W)[np.clip(cols, 0, rnd_w - 1)]
    source = src_rows[:, None] * W + src_cols[None, :]
    return np.where(inside, source, -1).reshape(-1)


def apply_input_map(x, source):
    """Gathers the transformed image: out[:, p] = x[:, source[p]], zero where source is -1."""
    C = x.shape[0]
    flat = x.reshape(C, -1)
    valid = source >= 0
    out = np.zeros_like(flat)
    out[:, valid] = flat[:, source[valid]]
    return out.reshape(x.shape)


def scatter_input_gradient(g, source):
    """Adjoint of apply_input_map: accumulates a gradient on the transformed image onto the input."""
    C = g.shape[0]
    flat = g.reshape(C, -1)
    valid = source >= 0
    scattered = np.zeros((flat.shape[1], C))
    np.add.at(scattered, source[valid], flat[:, valid].T)
    return scattered.T.reshape(g.shape)


def diverse_input_transform(x, cfg, rng):
    """Randomly resizes and pads x (with probability di_probability); the output keeps x's shape."""
    x = np.asarray(x, dtype=np.float64)
    source = sample_diverse_input_map(x.shape, cfg, rng)
    if source is None:
        return x.copy()
    return apply_input_map(x, source)


def model_gradient(model, x, y, source=None):
    """Input gradient of one model, taken on the transformed input when a DI map is given."""
    if source is None:
        return model.input_gradient(x, y)
    return scatter_input_gradient(model.input_gradient(apply_input_map(x, source), y), source)


# ---------------------------------------------------------------------------------------------
# Single-model attacks
# ---------------------------------------------------------------------------------------------

def fgsm_attack(model, x, y, cfg):
    """x + epsilon * sign(grad), clipped to [0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    g = model.input_gradient(x, y)
    return clip_to_unit(x + cfg.epsilon * sign_tensor(g))


def iterative_attack(model, x, y, cfg, base_attack='ifgsm', stream=0):
    """Runs a base attack against a single model.

    Args:
        model: DifferentiableClassifier under attack.
        x: Clean (C, H, W) image.
        y: Ground-truth label.
        cfg: AttackConfig.
        base_attack (str): One of BASE_ATTACKS.
        stream (int): Index of the random stream used by the diverse-input transform.

    Returns:
        x_adv: Adversarial image within the epsilon ball around x.
    """
    check_base_attack(base_attack)
    steps, _ = cfg.step_schedule(base_attack)
    rng = make_rng(cfg.seed, stream)
    state = AttackState.initial(x)
    for _ in range(steps):
        source = sample_diverse_input_map(state.x_adv.shape, cfg, rng) if base_attack == 'di2fgsm' else None
        g = model_gradient(model, state.x_adv, y, source)
        state = base_step(state, g, cfg, base_attack)
    return state.x_adv
