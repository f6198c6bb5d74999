"""Forward-only synthetic workloads: quadratics, linear and logistic
regression, multi-layer perceptrons, and a single-block transformer over
token sequences.

Every model consumes its layers strictly in ascending layer order through a
provider callable (`provider(layer_id) -> values`), which lets the
optimizer serve either resident or scratch-perturbed values without the
model knowing the difference. Datasets are regenerated from seeds, never
stored.
"""

from __future__ import annotations

import numpy as np

from .errors import StructuralError
from .noise import BATCH_SALT, derive_substream, hash_pair
from .tensors import ParameterSet, values_provider

DEFAULT_TRAIN = 1000
DEFAULT_EVAL = 1000
DEFAULT_BATCH = 16


class Task:
    """Base class: a parameter template plus batched loss evaluation."""

    name = "task"
    lipschitz = None  # smoothness bound where known analytically

    def template(self):
        raise NotImplementedError

    def loss_from(self, provider, batch):
        raise NotImplementedError

    def minibatch(self, base_seed, t, size=DEFAULT_BATCH):
        """Deterministic minibatch indices for step t (None = full data)."""
        return None

    def bound_loss(self, batch):
        """Convenience: a provider-loss closure bound to one batch."""
        return lambda provider: self.loss_from(provider, batch)

    def loss_at(self, p, batch=None):
        return self.loss_from(values_provider(p), batch)

    def full_train_loss(self, p):
        return self.loss_at(p, None)

    def eval_metrics(self, p):
        """Held-out metrics; keys become metrics.csv columns."""
        return {"eval_loss": self.full_train_loss(p)}

    def analytic_grad(self, p, batch=None):
        """Full flat gradient where a closed form exists."""
        raise NotImplementedError(f"{self.name} has no analytic gradient")

    @property
    def has_analytic_grad(self):
        try:
            self.analytic_grad
        except NotImplementedError:
            return False
        return type(self).analytic_grad is not Task.analytic_grad


def _batch_indices(base_seed, t, n, size):
    stream = derive_substream(hash_pair(base_seed, BATCH_SALT), t)
    u = stream.uniform(size)
    return np.minimum((u * n).astype(np.int64), n - 1)


# ---------------------------------------------------------------------------
# quadratic


class QuadraticTask(Task):
    """L(theta) = 0.5 theta' A theta with diagonal A of known spectrum."""

    name = "quadratic"

    def __init__(self, d, condition_number=1.0, dtype=np.float64, seed=0):
        if d < 1:
            raise ValueError("d must be >= 1")
        if condition_number < 1.0:
            raise ValueError("condition number must be >= 1")
        self.d = d
        self.dtype = np.dtype(dtype)
        self.eigs = np.linspace(1.0, float(condition_number), d)
        self.lipschitz = float(self.eigs.max())
        self.seed = seed

    def template(self):
        theta = derive_substream(hash_pair(self.seed, 0x71), 0).gaussian(self.d)
        theta /= np.linalg.norm(theta)
        return ParameterSet.from_arrays([("theta", theta.astype(self.dtype))])

    def loss_from(self, provider, batch):
        theta = provider(0).reshape(-1).astype(np.float64, copy=False)
        return float(0.5 * np.dot(self.eigs * theta, theta))

    def analytic_grad(self, p, batch=None):
        theta = p.layers[0].flat.astype(np.float64, copy=False)
        return self.eigs * theta

    def grad_norm_sq(self, p):
        g = self.analytic_grad(p)
        return float(np.dot(g, g))

    def eval_metrics(self, p):
        return {
            "eval_loss": self.full_train_loss(p),
            "grad_norm_sq": self.grad_norm_sq(p),
        }


def quadratic_task(d, condition_number=1.0, dtype=np.float64, seed=0):
    return QuadraticTask(d, condition_number, dtype=dtype, seed=seed)


# ---------------------------------------------------------------------------
# linear / logistic regression


class _RegressionBase(Task):
    def __init__(self, X, y, X_eval, y_eval, dtype, init=None):
        self.X = X
        self.y = y
        self.X_eval = X_eval
        self.y_eval = y_eval
        self.dtype = np.dtype(dtype)
        self.d = X.shape[1]
        self._init = init
        gram = (X.T @ X) / X.shape[0]
        self._gram_max_eig = float(np.linalg.eigvalsh(gram)[-1])

    def template(self):
        w = np.zeros(self.d) if self._init is None else np.asarray(self._init)
        return ParameterSet.from_arrays([("w", w.astype(self.dtype))])

    def minibatch(self, base_seed, t, size=DEFAULT_BATCH):
        return _batch_indices(base_seed, t, self.X.shape[0], size)

    def _select(self, batch, eval_set=False):
        X = self.X_eval if eval_set else self.X
        y = self.y_eval if eval_set else self.y
        if batch is None:
            return X, y
        return X[batch], y[batch]


class LinearTask(_RegressionBase):
    """Mean squared error, 0.5 * mean((x'w - y)^2)."""

    name = "linear"

    @property
    def lipschitz(self):
        return self._gram_max_eig

    def loss_from(self, provider, batch, eval_set=False):
        w = provider(0).reshape(-1)
        X, y = self._select(batch, eval_set)
        r = X @ w.astype(np.float64, copy=False) - y
        return float(0.5 * np.mean(r * r))

    def analytic_grad(self, p, batch=None):
        w = p.layers[0].flat.astype(np.float64, copy=False)
        X, y = self._select(batch)
        r = X @ w - y
        return X.T @ r / X.shape[0]

    def eval_metrics(self, p):
        return {
            "eval_loss": self.loss_from(values_provider(p), None, eval_set=True)
        }


class LogisticTask(_RegressionBase):
    """Binary cross-entropy with +/-1 labels via logits x'w."""

    name = "logistic"

    @property
    def lipschitz(self):
        # BCE Hessian is bounded by X'X / (4n).
        return 0.25 * self._gram_max_eig

    def loss_from(self, provider, batch, eval_set=False):
        w = provider(0).reshape(-1)
        X, y = self._select(batch, eval_set)
        margins = y * (X @ w.astype(np.float64, copy=False))
        return float(np.mean(np.logaddexp(0.0, -margins)))

    def analytic_grad(self, p, batch=None):
        w = p.layers[0].flat.astype(np.float64, copy=False)
        X, y = self._select(batch)
        margins = y * (X @ w)
        coeff = -y / (1.0 + np.exp(margins))
        return X.T @ coeff / X.shape[0]

    def accuracy(self, p, eval_set=False):
        w = p.layers[0].flat.astype(np.float64, copy=False)
        X, y = self._select(None, eval_set)
        return float(np.mean(np.sign(X @ w) == y))

    def eval_metrics(self, p):
        return {
            "eval_loss": self.loss_from(values_provider(p), None, eval_set=True),
            "eval_acc": self.accuracy(p, eval_set=True),
        }


def logistic_task(
    n_samples=DEFAULT_TRAIN, d=32, seed=0, margin=3.0, flip_noise=0.3, dtype=np.float64
):
    """Synthetic near-separable binary classification."""
    rng = np.random.default_rng(seed)
    w_true = rng.standard_normal(d) * (margin / np.sqrt(d))
    X = rng.standard_normal((n_samples, d))
    X_eval = rng.standard_normal((DEFAULT_EVAL, d))
    y = np.sign(X @ w_true + flip_noise * rng.standard_normal(n_samples))
    y_eval = np.sign(X_eval @ w_true + flip_noise * rng.standard_normal(DEFAULT_EVAL))
    y[y == 0] = 1.0
    y_eval[y_eval == 0] = 1.0
    return LogisticTask(X, y, X_eval, y_eval, dtype)


def linear_task(
    n_samples=DEFAULT_TRAIN,
    d=32,
    seed=0,
    teacher=None,
    label_noise=0.0,
    dtype=np.float64,
    init=None,
):
    """Linear regression against a fixed teacher vector."""
    rng = np.random.default_rng(seed)
    if teacher is None:
        teacher = rng.standard_normal(d)
    teacher = np.asarray(teacher, dtype=np.float64)
    X = rng.standard_normal((n_samples, d))
    X_eval = rng.standard_normal((DEFAULT_EVAL, d))
    y = X @ teacher + label_noise * rng.standard_normal(n_samples)
    y_eval = X_eval @ teacher + label_noise * rng.standard_normal(DEFAULT_EVAL)
    return LinearTask(X, y, X_eval, y_eval, dtype, init=init)


# ---------------------------------------------------------------------------
# multi-layer perceptron (regression on a seeded teacher network)


class MlpTask(Task):
    """Fully-connected tanh (or relu) network trained with mean squared error.

    Layer order is fc{i}.weight then fc{i}.bias, consumed strictly in order.
    """

    name = "mlp"

    def __init__(self, widths, activation="tanh", seed=0, n_train=DEFAULT_TRAIN,
                 dtype=np.float64):
        if len(widths) < 2:
            raise StructuralError("widths needs at least input and output sizes")
        if activation not in ("tanh", "relu"):
            raise ValueError(f"unknown activation {activation!r}")
        self.widths = list(widths)
        self.activation = activation
        self.seed = seed
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        d_in, d_out = widths[0], widths[-1]
        self.X = rng.standard_normal((n_train, d_in))
        self.X_eval = rng.standard_normal((DEFAULT_EVAL, d_in))
        teacher = self._init_arrays(np.random.default_rng(seed + 1))
        self.y = self._forward_arrays(teacher, self.X)[0]
        self.y_eval = self._forward_arrays(teacher, self.X_eval)[0]

    def _init_arrays(self, rng):
        arrays = []
        for w_in, w_out in zip(self.widths[:-1], self.widths[1:]):
            arrays.append(rng.standard_normal((w_out, w_in)) / np.sqrt(w_in))
            arrays.append(np.zeros(w_out))
        return arrays

    def template(self):
        rng = np.random.default_rng(self.seed + 2)
        arrays = self._init_arrays(rng)
        named = []
        for i in range(len(self.widths) - 1):
            named.append((f"fc{i}.weight", arrays[2 * i].astype(self.dtype)))
            named.append((f"fc{i}.bias", arrays[2 * i + 1].astype(self.dtype)))
        return ParameterSet.from_arrays(named)

    def _act(self, x):
        return np.tanh(x) if self.activation == "tanh" else np.maximum(x, 0.0)

    def _forward_arrays(self, arrays, X):
        """Returns (output, per-layer pre-activations, per-layer inputs)."""
        h = X
        pre_acts, inputs = [], []
        n_layers = len(arrays) // 2
        for i in range(n_layers):
            W, b = arrays[2 * i], arrays[2 * i + 1]
            inputs.append(h)
            s = h @ W.T + b
            pre_acts.append(s)
            h = self._act(s) if i < n_layers - 1 else s
        return h, pre_acts, inputs

    def forward(self, provider, X):
        """Network output for rows of X, consuming layers in order."""
        h = X
        n_layers = len(self.widths) - 1
        for i in range(n_layers):
            W = provider(2 * i)
            b = provider(2 * i + 1)
            s = h @ W.reshape(self.widths[i + 1], self.widths[i]).T + b.reshape(-1)
            h = self._act(s) if i < n_layers - 1 else s
        return h

    def minibatch(self, base_seed, t, size=DEFAULT_BATCH):
        return _batch_indices(base_seed, t, self.X.shape[0], size)

    def _select(self, batch, eval_set=False):
        X = self.X_eval if eval_set else self.X
        y = self.y_eval if eval_set else self.y
        if batch is None:
            return X, y
        return X[batch], y[batch]

    def loss_from(self, provider, batch, eval_set=False):
        X, y = self._select(batch, eval_set)
        pred = self.forward(provider, X)
        r = pred - y
        return float(0.5 * np.mean(r * r))

    def analytic_grad(self, p, batch=None):
        """Handwritten backprop through the tanh network (flat order)."""
        if self.activation != "tanh":
            raise NotImplementedError("analytic gradient only for tanh")
        X, y = self._select(batch)
        arrays = [t.values.astype(np.float64, copy=False) for t in p.layers]
        out, pre_acts, inputs = self._forward_arrays(arrays, X)
        n_layers = len(self.widths) - 1
        scale = 1.0 / out.size
        delta = (out - y) * scale
        grads = [None] * (2 * n_layers)
        for i in range(n_layers - 1, -1, -1):
            grads[2 * i] = delta.T @ inputs[i]
            grads[2 * i + 1] = delta.sum(axis=0)
            if i > 0:
                back = delta @ arrays[2 * i]
                delta = back * (1.0 - np.tanh(pre_acts[i - 1]) ** 2)
        return np.concatenate([g.reshape(-1) for g in grads])

    def eval_metrics(self, p):
        return {
            "eval_loss": self.loss_from(values_provider(p), None, eval_set=True)
        }


def mlp_task(widths, activation="tanh", seed=0, dtype=np.float64):
    return MlpTask(widths, activation=activation, seed=seed, dtype=dtype)


def equal_width_mlp_task(width=24, n_layers=8, seed=0, dtype=np.float64):
    """The deep equal-width stack used by the restore and memory checks."""
    return MlpTask([width] * (n_layers + 1), seed=seed, dtype=dtype)


# ---------------------------------------------------------------------------
# single-block transformer on synthetic token sequences


class TinyTransformerTask(Task):
    """One causal attention block + MLP, next-token cross-entropy.

    Sequences follow a seeded noisy-successor rule so the loss is learnable;
    with the zero-initialized output head the initial logits are uniform and
    the loss starts at ln(vocab).
    """

    name = "transformer"

    def __init__(self, d_model=32, n_heads=2, seq_len=16, vocab=32, seed=0,
                 n_train=DEFAULT_TRAIN, dtype=np.float64):
        if d_model % n_heads != 0:
            raise StructuralError("d_model must divide evenly into heads")
        if seq_len < 1 or vocab < 2:
            raise StructuralError("need seq_len >= 1 and vocab >= 2")
        self.d_model = d_model
        self.n_heads = n_heads
        self.seq_len = seq_len
        self.vocab = vocab
        self.seed = seed
        self.dtype = np.dtype(dtype)
        n_params = vocab * d_model * 2 + 4 * d_model * d_model + 2 * d_model
        n_params += 2 * d_model * 4 * d_model
        if n_params > 10**6:
            raise StructuralError(f"configuration has {n_params} > 1e6 parameters")
        self.tokens = self._sequences(seed, n_train)
        self.tokens_eval = self._sequences(seed + 1, DEFAULT_EVAL)

    def _sequences(self, seed, count):
        rng = np.random.default_rng(seed)
        toks = np.empty((count, self.seq_len + 1), dtype=np.int64)
        toks[:, 0] = rng.integers(0, self.vocab, size=count)
        for j in range(1, self.seq_len + 1):
            successor = (toks[:, j - 1] * 7 + 3) % self.vocab
            noise = rng.integers(0, self.vocab, size=count)
            use_noise = rng.random(count) < 0.3
            toks[:, j] = np.where(use_noise, noise, successor)
        return toks

    def template(self):
        rng = np.random.default_rng(self.seed + 2)
        d = self.d_model

        def mat(shape, fan_in):
            return (rng.standard_normal(shape) / np.sqrt(fan_in)).astype(self.dtype)

        named = [
            ("embed.weight", mat((self.vocab, d), d)),
            ("norm1.gain", np.ones(d, dtype=self.dtype)),
            ("attn.q.weight", mat((d, d), d)),
            ("attn.k.weight", mat((d, d), d)),
            ("attn.v.weight", mat((d, d), d)),
            ("attn.out.weight", mat((d, d), d)),
            ("norm2.gain", np.ones(d, dtype=self.dtype)),
            ("mlp.fc1.weight", mat((4 * d, d), d)),
            ("mlp.fc2.weight", mat((d, 4 * d), 4 * d)),
            ("head.weight", np.zeros((self.vocab, d), dtype=self.dtype)),
        ]
        return ParameterSet.from_arrays(named)

    @staticmethod
    def _rmsnorm(x):
        return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + 1e-6)

    def logits(self, provider, tokens):
        """(batch, seq, vocab) logits; consumes the ten layers in order."""
        d, h = self.d_model, self.n_heads
        dh = d // h
        B, S = tokens.shape

        embed = provider(0).reshape(self.vocab, d)
        x = embed[tokens]
        g1 = provider(1).reshape(d)
        hn = self._rmsnorm(x) * g1
        q = hn @ provider(2).reshape(d, d).T
        k = hn @ provider(3).reshape(d, d).T
        v = hn @ provider(4).reshape(d, d).T
        q = q.reshape(B, S, h, dh).transpose(0, 2, 1, 3)
        k = k.reshape(B, S, h, dh).transpose(0, 2, 1, 3)
        v = v.reshape(B, S, h, dh).transpose(0, 2, 1, 3)
        scores = q @ k.transpose(0, 1, 3, 2) / np.sqrt(dh)
        causal = np.tril(np.ones((S, S), dtype=bool))
        scores = np.where(causal, scores, -np.inf)
        scores = scores - scores.max(axis=-1, keepdims=True)
        weights = np.exp(scores)
        weights /= weights.sum(axis=-1, keepdims=True)
        attn = (weights @ v).transpose(0, 2, 1, 3).reshape(B, S, d)
        x = x + attn @ provider(5).reshape(d, d).T
        g2 = provider(6).reshape(d)
        hn2 = self._rmsnorm(x) * g2
        m = np.tanh(hn2 @ provider(7).reshape(4 * d, d).T)
        x = x + m @ provider(8).reshape(d, 4 * d).T
        return x @ provider(9).reshape(self.vocab, d).T

    def minibatch(self, base_seed, t, size=DEFAULT_BATCH):
        return _batch_indices(base_seed, t, self.tokens.shape[0], size)

    def _select(self, batch, eval_set=False):
        toks = self.tokens_eval if eval_set else self.tokens
        return toks if batch is None else toks[batch]

    def loss_from(self, provider, batch, eval_set=False):
        toks = self._select(batch, eval_set)
        inputs, targets = toks[:, :-1], toks[:, 1:]
        logits = self.logits(provider, inputs)
        shifted = logits - logits.max(axis=-1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=-1))
        picked = np.take_along_axis(shifted, targets[..., None], axis=-1)[..., 0]
        return float(np.mean(logz - picked))

    def eval_metrics(self, p):
        return {
            "eval_loss": self.loss_from(values_provider(p), None, eval_set=True)
        }


def tiny_transformer_task(d_model=32, n_heads=2, seq_len=16, vocab=32, seed=0,
                          dtype=np.float64):
    return TinyTransformerTask(d_model, n_heads, seq_len, vocab, seed=seed,
                               dtype=dtype)


# ---------------------------------------------------------------------------
# pretrain-then-shift pair


class ShiftedTaskPair:
    """A pretraining task and a fine-tuning task sharing one template.

    The pretraining teacher has three magnitude tiers; the fine-tuning
    teacher flips the signs of the small tier only, so after pretraining all
    of the improvement available on task B lives in the small-magnitude
    weights while the large, well-trained weights are already correct.
    """

    def __init__(self, task_a, task_b, tiers, teacher_a, teacher_b):
        self.task_a = task_a
        self.task_b = task_b
        self.tiers = tiers  # dict: name -> index array
        self.teacher_a = teacher_a
        self.teacher_b = teacher_b
        self._pretrained = None

    def pretrained(self, lr=None, steps=4000):
        """Parameters first-order-trained on task A (cached)."""
        from .oracle import first_order_baseline

        if self._pretrained is None:
            task = self.task_a
            lr = lr if lr is not None else 0.9 / task.lipschitz
            trained, _ = first_order_baseline(task, task.template(), lr, steps)
            self._pretrained = trained
        return self._pretrained.copy()


def shifted_pair(d=32, n_samples=DEFAULT_TRAIN, seed=0, shift_magnitude=0.1,
                 label_noise=0.05, dtype=np.float64):
    """Build the pair on linear regression (trainable by plain first order).

    The small tier is one entry short of a quarter of d, so a 0.75-sparsity
    magnitude threshold lands on the smallest medium-tier entry: every small
    weight then has clearance below the threshold and stays selected while
    it travels to its sign-flipped target, instead of drifting out of the
    band mid-run.
    """
    if d < 16 or d % 4 != 0:
        raise StructuralError("d must be a multiple of 4, at least 16")
    rng = np.random.default_rng(hash_pair(seed, 0x5F) % (2**32))
    order = rng.permutation(d)
    n_large = d // 4
    n_small = d // 4 - 1
    tiers = {
        "large": np.sort(order[:n_large]),
        "medium": np.sort(order[n_large : d - n_small]),
        "small": np.sort(order[d - n_small :]),
    }
    signs = np.where(rng.random(d) < 0.5, -1.0, 1.0)
    teacher_a = np.empty(d)
    teacher_a[tiers["large"]] = 2.0 * signs[tiers["large"]]
    medium = tiers["medium"]
    teacher_a[medium] = (0.4 + 0.2 * rng.random(medium.size)) * signs[medium]
    # One buffer entry midway between the tiers; the threshold calibrates to
    # it, it is already at its target, and an escape only freezes it there.
    teacher_a[medium[0]] = 3.0 * shift_magnitude * signs[medium[0]]
    teacher_a[tiers["small"]] = shift_magnitude * signs[tiers["small"]]
    teacher_b = teacher_a.copy()
    teacher_b[tiers["small"]] *= -1.0

    task_a = linear_task(n_samples, d, seed=seed, teacher=teacher_a,
                         label_noise=label_noise, dtype=dtype)
    task_b = linear_task(n_samples, d, seed=seed + 1, teacher=teacher_b,
                         label_noise=label_noise, dtype=dtype)
    return ShiftedTaskPair(task_a, task_b, tiers, teacher_a, teacher_b)
