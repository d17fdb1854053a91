"""Sequence-to-sequence LSTM autoencoder over variable-length trajectories.

A 2-layer encoder compresses a (T, 5) trajectory into the final hidden state of
its top layer; a 2-layer decoder, initialized from that latent vector,
reconstructs the inputs in reverse time order through an affine output
projection. The training objective is the squared Euclidean reconstruction
error, minimized with Adam under the stepwise learning-rate policy.

The decoder is unconditioned by default (each step consumes the previous
step's own reconstruction, starting from a zero vector); a teacher-forced
variant that feeds the previous target instead is available via
``conditioning="input"``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import nn
from .cohort import SubjectTrajectory, truncate_visits
from .exceptions import ConvergenceError

CONDITIONING_MODES = ("none", "input")


@dataclass
class TrainConfig:
    """Optimization settings; defaults follow the published training recipe."""

    base_lr: float = 0.01
    max_iters: int = 100000
    batch_size: int = 64
    lr_drop_every: int = 20000
    lr_drop_factor: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be > 0")
        if self.max_iters < 0 or self.batch_size < 1 or self.lr_drop_every < 1:
            raise ValueError("max_iters, batch_size, lr_drop_every must be positive")
        if not 0.0 < self.lr_drop_factor < 1.0:
            raise ValueError("lr_drop_factor must be in (0, 1)")


@dataclass
class AutoencoderModel:
    """Parameter bundle: encoder stack, decoder stack, output projection."""

    encoder: nn.LstmStack
    decoder: nn.LstmStack
    proj_W: np.ndarray  # (input_dim, hidden_dim)
    proj_b: np.ndarray  # (input_dim,)
    seed: int = 0
    conditioning: str = "none"

    def __post_init__(self):
        if self.conditioning not in CONDITIONING_MODES:
            raise ValueError(f"conditioning must be one of {CONDITIONING_MODES}")
        h = self.encoder.top_hidden_dim
        d = self.encoder.input_dim
        if self.decoder.input_dim != d:
            raise ValueError("decoder must consume reconstructed measure vectors")
        for layer in self.decoder.layers:
            if layer.hidden_dim != h:
                raise ValueError("decoder hidden dims must equal the latent dimension")
        if self.proj_W.shape != (d, h) or self.proj_b.shape != (d,):
            raise ValueError("projection shape must be (input_dim, hidden_dim)")

    @property
    def input_dim(self) -> int:
        return self.encoder.input_dim

    @property
    def hidden_dim(self) -> int:
        return self.encoder.top_hidden_dim

    def parameters(self) -> list[np.ndarray]:
        """All arrays in declared order: encoder, decoder, projection."""
        return self.encoder.arrays() + self.decoder.arrays() + [self.proj_W, self.proj_b]

    def with_parameters(self, arrays: list[np.ndarray]) -> "AutoencoderModel":
        """Same architecture over a new flat parameter list (no copies)."""
        expected = len(self.parameters())
        if len(arrays) != expected:
            raise ValueError(f"expected {expected} arrays, got {len(arrays)}")
        pos = 0

        def take_stack(stack):
            nonlocal pos
            layers = []
            for _ in stack.layers:
                layers.append(nn.LstmLayerParams(*arrays[pos:pos + 8]))
                pos += 8
            return nn.LstmStack(layers)

        encoder = take_stack(self.encoder)
        decoder = take_stack(self.decoder)
        return AutoencoderModel(encoder, decoder, arrays[pos], arrays[pos + 1],
                                self.seed, self.conditioning)


@dataclass
class LatentFeatures:
    """One subject's trajectory encoding for a given prediction horizon."""

    z: np.ndarray
    subject_id: str
    horizon_months: int


def init_autoencoder(input_dim: int, hidden_dim: int, seed: int,
                     n_layers: int = 2, conditioning: str = "none") -> AutoencoderModel:
    """Fresh model with seeded uniform initialization; deterministic per seed."""
    if input_dim < 1 or hidden_dim < 1:
        raise ValueError("input_dim and hidden_dim must be >= 1")
    rng = np.random.default_rng(seed)
    enc_layers, dims = [], [input_dim] + [hidden_dim] * n_layers
    for d_in, d_out in zip(dims, dims[1:]):
        enc_layers.append(nn.init_layer(d_in, d_out, rng))
    dec_layers = []
    dec_dims = [input_dim] + [hidden_dim] * n_layers
    for d_in, d_out in zip(dec_dims, dec_dims[1:]):
        dec_layers.append(nn.init_layer(d_in, d_out, rng))
    r = 1.0 / np.sqrt(hidden_dim)
    proj_W = rng.uniform(-r, r, size=(input_dim, hidden_dim))
    proj_b = np.zeros(input_dim)
    return AutoencoderModel(nn.LstmStack(enc_layers), nn.LstmStack(dec_layers),
                            proj_W, proj_b, seed, conditioning)


def _check_sequence(model: AutoencoderModel, seq) -> np.ndarray:
    seq = np.asarray(seq, dtype=np.float64)
    if seq.ndim != 2 or seq.shape[0] == 0:
        raise ValueError("sequence must be a nonempty (T, input_dim) array")
    if seq.shape[1] != model.input_dim:
        raise ValueError(f"sequence has {seq.shape[1]} measures, "
                         f"model expects {model.input_dim}")
    return seq


def encode(model: AutoencoderModel, seq) -> np.ndarray:
    """Latent vector: final hidden state of the top encoder layer, zero init."""
    seq = _check_sequence(model, seq)
    fwd = nn.forward_sequence(model.encoder, seq)
    return fwd.final[-1].h[0].copy()


def _decoder_unroll(model: AutoencoderModel, z: np.ndarray, n_steps: int,
                    rev_targets: np.ndarray | None):
    """Batched decoder loop from latent z; returns outputs and BPTT caches.

    ``rev_targets`` (reverse time order, shape (T, B, D)) is consumed only in
    the teacher-forced conditioning mode.
    """
    B = z.shape[0]
    layers = model.decoder.layers
    states = [nn.CellState(z, np.zeros((B, l.hidden_dim))) for l in layers]
    caches: list[list[nn.CellCache]] = [[] for _ in layers]
    hidden_top = np.empty((n_steps, B, model.hidden_dim))
    outputs = np.empty((n_steps, B, model.input_dim))
    x = np.zeros((B, model.input_dim))
    for k in range(n_steps):
        if model.conditioning == "input" and rev_targets is not None and k > 0:
            x = rev_targets[k - 1]
        inp = x
        for li, layer in enumerate(layers):
            states[li], cache = nn.cell_forward(layer, inp, states[li])
            caches[li].append(cache)
            inp = states[li].h
        hidden_top[k] = inp
        outputs[k] = inp @ model.proj_W.T + model.proj_b
        x = outputs[k]
    return outputs, hidden_top, caches


def decode(model: AutoencoderModel, z, n_steps: int) -> np.ndarray:
    """Reconstruct ``n_steps`` measure vectors from a latent; output k is the
    reconstruction of input time point T+1-k (reverse order).

    Generation from a latent alone is always unconditioned (each step consumes
    the previous reconstruction), even for teacher-forced-trained models.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (model.hidden_dim,):
        raise ValueError(f"z must have length {model.hidden_dim}")
    outputs, _, _ = _decoder_unroll(model, z[None, :], n_steps, None)
    return outputs[:, 0, :]


def _sum_loss_and_grads(model: AutoencoderModel, F: np.ndarray,
                        want_grads: bool = True):
    """Summed squared reconstruction error over a same-length batch (B, T, D),
    with gradients for every encoder, decoder, and projection parameter."""
    B, T, _ = F.shape
    seq = np.ascontiguousarray(np.transpose(F, (1, 0, 2)))  # (T, B, D)
    rev_targets = seq[::-1]
    fwd = nn.forward_sequence(model.encoder, seq)
    z = fwd.final[-1].h
    outputs, hidden_top, caches = _decoder_unroll(model, z, T, rev_targets)
    residual = outputs - rev_targets
    sse = float((residual ** 2).sum())
    if not want_grads:
        return sse, None

    dec = model.decoder
    dec_grads = nn.zeros_like_stack(dec)
    dproj_W = np.zeros_like(model.proj_W)
    dproj_b = np.zeros_like(model.proj_b)
    dh_next = [np.zeros((B, l.hidden_dim)) for l in dec.layers]
    dc_next = [np.zeros((B, l.hidden_dim)) for l in dec.layers]
    dx_next = None
    for k in range(T - 1, -1, -1):
        dy = 2.0 * residual[k]
        if dx_next is not None and model.conditioning == "none":
            dy = dy + dx_next  # output fed the next step's input
        dproj_W += dy.T @ hidden_top[k]
        dproj_b += dy.sum(axis=0)
        d_in = dy @ model.proj_W
        for li in range(len(dec.layers) - 1, -1, -1):
            dh = d_in + dh_next[li]
            d_in, dh_next[li], dc_next[li] = nn.cell_backward(
                dec.layers[li], caches[li][k], dh, dc_next[li], dec_grads.layers[li])
        dx_next = d_in
    dz = dh_next[0]
    for extra in dh_next[1:]:
        dz = dz + extra  # every decoder layer's initial hidden state was z

    d_hidden = np.zeros((T, B, model.encoder.top_hidden_dim))
    d_hidden[-1] = dz
    enc_grads, _, _ = nn.backward_sequence(model.encoder, fwd, d_hidden)
    grads = enc_grads.arrays() + dec_grads.arrays() + [dproj_W, dproj_b]
    return sse, grads


def _group_by_length(batch: list[np.ndarray]) -> dict[int, list[int]]:
    groups: dict[int, list[int]] = {}
    for i, seq in enumerate(batch):
        groups.setdefault(seq.shape[0], []).append(i)
    return groups


def reconstruction_loss(model: AutoencoderModel, batch) -> float:
    """Mean over subjects of the summed squared reverse-order residuals."""
    seqs = [_check_sequence(model, s) for s in batch]
    if not seqs:
        raise ValueError("batch must be nonempty")
    total = 0.0
    for T, idxs in sorted(_group_by_length(seqs).items()):
        F = np.stack([seqs[i] for i in idxs])
        sse, _ = _sum_loss_and_grads(model, F, want_grads=False)
        total += sse
    return total / len(seqs)


def loss_and_gradients(model: AutoencoderModel, batch) -> tuple[float, list[np.ndarray]]:
    """Reconstruction loss plus its gradient in ``model.parameters()`` order."""
    seqs = [_check_sequence(model, s) for s in batch]
    if not seqs:
        raise ValueError("batch must be nonempty")
    total = 0.0
    grads = [np.zeros_like(p) for p in model.parameters()]
    for T, idxs in sorted(_group_by_length(seqs).items()):
        F = np.stack([seqs[i] for i in idxs])
        sse, g = _sum_loss_and_grads(model, F)
        total += sse
        for acc, part in zip(grads, g):
            acc += part
    n = len(seqs)
    return total / n, [g / n for g in grads]


def train(model: AutoencoderModel, dataset, cfg: TrainConfig
          ) -> tuple[AutoencoderModel, list[tuple[int, float, float]]]:
    """Adam training over length-stratified minibatches.

    Minibatches are drawn from one sequence-length stratum at a time, strata
    chosen proportionally to their sizes, so every batch stacks cleanly without
    padding. Returns the trained model and (iteration, lr, loss) rows recorded
    every 100 iterations. The input model is left untouched.
    """
    seqs = [_check_sequence(model, s) for s in dataset]
    if not seqs:
        raise ValueError("dataset must be nonempty")
    groups = sorted(_group_by_length(seqs).items())
    sizes = np.array([len(idx) for _, idx in groups], dtype=np.float64)
    probs = sizes / sizes.sum()
    stacks = [np.stack([seqs[i] for i in idx]) for _, idx in groups]

    rng = np.random.default_rng(cfg.seed)
    params = [p.copy() for p in model.parameters()]
    state = nn.adam_init(params)
    history: list[tuple[int, float, float]] = []
    for it in range(cfg.max_iters):
        lr = nn.lr_schedule(cfg.base_lr, it, cfg.lr_drop_every, cfg.lr_drop_factor)
        stratum = int(rng.choice(len(groups), p=probs))
        pick = rng.integers(0, stacks[stratum].shape[0], size=cfg.batch_size)
        F = stacks[stratum][pick]
        current = model.with_parameters(params)
        sse, grads = _sum_loss_and_grads(current, F)
        loss = sse / cfg.batch_size
        if not np.isfinite(loss):
            raise ConvergenceError(f"non-finite loss at iteration {it} (lr={lr!r})")
        if it % 100 == 0:
            history.append((it, lr, loss))
        params, state = nn.adam_update(params, [g / cfg.batch_size for g in grads],
                                       state, lr)
    return model.with_parameters(params), history


def extract_features(model: AutoencoderModel, subjects: list[SubjectTrajectory],
                     horizon_months: int) -> tuple[list[LatentFeatures], list[str]]:
    """Encode each subject's horizon-truncated trajectory.

    Subjects must already be normalized with the training-split statistics.
    Returns (features, excluded): a subject with no usable visit is reported in
    ``excluded`` rather than silently dropped.
    """
    features, excluded = [], []
    for s in subjects:
        truncated = truncate_visits(s, horizon_months)
        if not truncated.visits:
            excluded.append(f"subject {s.subject_id}: no usable visit at "
                            f"horizon {horizon_months}m")
            continue
        z = encode(model, truncated.measure_matrix())
        features.append(LatentFeatures(z, s.subject_id, horizon_months))
    return features, excluded


# --- serialization ----------------------------------------------------------

_FORMAT_VERSION = 1


def save_model(model: AutoencoderModel, path) -> None:
    """Flat .npz container: format version, dims, seed, arrays in declared order."""
    data = {
        "format_version": np.int64(_FORMAT_VERSION),
        "input_dim": np.int64(model.input_dim),
        "hidden_dim": np.int64(model.hidden_dim),
        "n_encoder_layers": np.int64(len(model.encoder.layers)),
        "n_decoder_layers": np.int64(len(model.decoder.layers)),
        "seed": np.int64(model.seed),
        "conditioning": np.str_(model.conditioning),
    }
    for prefix, stack in (("enc", model.encoder), ("dec", model.decoder)):
        for li, layer in enumerate(stack.layers):
            for name in ("W_f", "W_i", "W_c", "W_o", "b_f", "b_i", "b_c", "b_o"):
                data[f"{prefix}{li}_{name}"] = getattr(layer, name)
    data["proj_W"] = model.proj_W
    data["proj_b"] = model.proj_b
    np.savez(path, **data)


def load_model(path) -> AutoencoderModel:
    """Bit-exact inverse of save_model."""
    with np.load(path, allow_pickle=False) as data:
        version = int(data["format_version"])
        if version != _FORMAT_VERSION:
            raise ValueError(f"unsupported model format version {version}")

        def read_stack(prefix, count):
            layers = []
            for li in range(count):
                arrays = [data[f"{prefix}{li}_{name}"]
                          for name in ("W_f", "W_i", "W_c", "W_o",
                                       "b_f", "b_i", "b_c", "b_o")]
                layers.append(nn.LstmLayerParams(*arrays))
            return nn.LstmStack(layers)

        encoder = read_stack("enc", int(data["n_encoder_layers"]))
        decoder = read_stack("dec", int(data["n_decoder_layers"]))
        return AutoencoderModel(encoder, decoder, data["proj_W"], data["proj_b"],
                                int(data["seed"]), str(data["conditioning"]))


# --- estimator facade --------------------------------------------------------

class LstmAutoencoder(BaseEstimator, TransformerMixin):
    """Trajectory-to-latent transformer with the scikit-learn fit/transform API.

    ``fit`` consumes a list of (T_i, input_dim) float arrays (variable T_i) and
    trains the autoencoder; ``transform`` maps such a list to an
    (n_subjects, hidden_dim) latent matrix, encoding each trajectory
    independently of the others.
    """

    def __init__(self, hidden_dim: int = 5, base_lr: float = 0.01,
                 max_iters: int = 100000, batch_size: int = 64,
                 lr_drop_every: int = 20000, lr_drop_factor: float = 0.1,
                 conditioning: str = "none", random_state: int = 0):
        self.hidden_dim = hidden_dim
        self.base_lr = base_lr
        self.max_iters = max_iters
        self.batch_size = batch_size
        self.lr_drop_every = lr_drop_every
        self.lr_drop_factor = lr_drop_factor
        self.conditioning = conditioning
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        return TrainConfig(base_lr=self.base_lr, max_iters=self.max_iters,
                           batch_size=self.batch_size, lr_drop_every=self.lr_drop_every,
                           lr_drop_factor=self.lr_drop_factor, seed=self.random_state)

    def fit(self, X, y=None) -> "LstmAutoencoder":
        seqs = [np.asarray(s, dtype=np.float64) for s in X]
        if not seqs:
            raise ValueError("X must contain at least one trajectory")
        input_dim = seqs[0].shape[1]
        initial = init_autoencoder(input_dim, self.hidden_dim, self.random_state,
                                   conditioning=self.conditioning)
        self.model_, self.loss_history_ = train(initial, seqs, self._train_config())
        return self

    def transform(self, X) -> np.ndarray:
        return np.array([encode(self.model_, s) for s in X])

    def encode(self, seq) -> np.ndarray:
        return encode(self.model_, seq)

    def decode(self, z, n_steps: int) -> np.ndarray:
        return decode(self.model_, z, n_steps)

    def reconstruction_loss(self, X) -> float:
        return reconstruction_loss(self.model_, X)

    def save(self, path) -> None:
        save_model(self.model_, path)

    @classmethod
    def from_file(cls, path) -> "LstmAutoencoder":
        model = load_model(path)
        est = cls(hidden_dim=model.hidden_dim, conditioning=model.conditioning,
                  random_state=model.seed)
        est.model_ = model
        est.loss_history_ = []
        return est
