"""Training losses, correlation metrics, and the differentiable rank proxy.

The total training objective combines a per-sample MSE term with two ranking
regularizers: an all-pairs age-difference loss and a Spearman-correlation
proxy that replaces the non-differentiable rank operator with a pre-trained
bidirectional LSTM.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import serialization
from .autodiff import LSTMParams, Tensor, as_tensor
from .optim import Adam, he_init


# ---------------------------------------------------------------------------
# ranks and correlations (evaluation-side, plain numpy)

def fractional_rank(values) -> np.ndarray:
    """Ascending 1-based ranks; ties get the mean of their occupied positions."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size < 1:
        raise ValueError("fractional_rank expects a non-empty 1-D vector")
    order = np.argsort(v, kind="stable")
    ranks = np.empty(v.size, dtype=np.float64)
    positions = np.arange(1, v.size + 1, dtype=np.float64)
    sorted_v = v[order]
    i = 0
    while i < v.size:
        j = i
        while j + 1 < v.size and sorted_v[j + 1] == sorted_v[i]:
            j += 1
        ranks[order[i:j + 1]] = positions[i:j + 1].mean()
        i = j + 1
    return ranks


def pcc(a, b) -> float:
    """Pearson's correlation coefficient (sample statistics)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("pcc expects two equal-length 1-D vectors")
    if a.size < 2:
        raise ValueError("pcc requires at least 2 samples")
    da = a - a.mean()
    db = b - b.mean()
    denom = np.sqrt((da * da).sum() * (db * db).sum())
    if denom == 0.0:
        raise ValueError("pcc undefined: zero variance input")
    return float((da * db).sum() / denom)


def srcc(a, b) -> float:
    """Spearman's rank correlation: Pearson correlation of fractional ranks."""
    ra = fractional_rank(a)
    rb = fractional_rank(b)
    try:
        return pcc(ra, rb)
    except ValueError as exc:
        raise ValueError("srcc undefined: zero rank variance") from exc


def srcc_tie_free(a, b) -> float:
    """Shortcut formula 1 - 6*sum(d^2)/(N(N^2-1)); valid only without ties."""
    ra = fractional_rank(a)
    rb = fractional_rank(b)
    n = ra.size
    d = ra - rb
    return float(1.0 - 6.0 * (d * d).sum() / (n * (n * n - 1)))


# ---------------------------------------------------------------------------
# differentiable losses

def _pair(y_hat, y) -> tuple[Tensor, Tensor]:
    y_hat = as_tensor(y_hat)
    y = as_tensor(y)
    if y_hat.data.shape != y.data.shape or y_hat.data.ndim != 1:
        raise ValueError(f"loss expects equal-length vectors, got {y_hat.data.shape} vs {y.data.shape}")
    if y_hat.data.size < 1:
        raise ValueError("loss requires at least one sample")
    return y_hat, y


def mae_loss(y_hat, y) -> Tensor:
    y_hat, y = _pair(y_hat, y)
    return ad.mean_all(ad.absolute(ad.sub(y_hat, y)))


def mse_loss(y_hat, y) -> Tensor:
    y_hat, y = _pair(y_hat, y)
    return ad.mean_all(ad.square(ad.sub(y_hat, y)))


def age_difference_loss(y_hat, y) -> Tensor:
    """Mean over unordered pairs of ((yh_i - yh_j) - (y_i - y_j))^2."""
    y_hat, y = _pair(y_hat, y)
    n = y_hat.data.size
    if n < 2:
        raise ValueError("age_difference_loss requires at least 2 samples")
    e = ad.sub(y_hat, y)
    col = ad.reshape(e, (n, 1))
    row = ad.reshape(e, (1, n))
    sq = ad.square(ad.sub(col, row))  # [n, n], diagonal zero, symmetric
    return ad.div(ad.sum_all(sq), float(n * (n - 1)))


def rank_loss_exact(y_hat, y) -> float:
    """Evaluation-only sum of squared fractional-rank differences."""
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y_hat.shape != y.shape or y_hat.size < 2:
        raise ValueError("rank_loss_exact expects equal-length vectors with N >= 2")
    d = fractional_rank(y_hat) - fractional_rank(y)
    return float((d * d).sum())


# ---------------------------------------------------------------------------
# the rank-proxy sorter

def _minmax_normalize_tensor(scores: Tensor) -> Tensor:
    lo = ad.min_all(scores)
    hi = ad.max_all(scores)
    if hi.item() == lo.item():
        return Tensor(np.full(scores.data.shape, 0.5))
    return ad.div(ad.sub(scores, lo), ad.sub(hi, lo))


def _minmax_normalize_batch(seqs: np.ndarray) -> np.ndarray:
    lo = seqs.min(axis=1, keepdims=True)
    hi = seqs.max(axis=1, keepdims=True)
    span = hi - lo
    out = np.full_like(seqs, 0.5)
    ok = span[:, 0] > 0
    out[ok] = (seqs[ok] - lo[ok]) / span[ok]
    return out


# fixed thermometer encoding of normalized scores fed to the recurrent proxy;
# soft bins make the LSTM's smaller-than counting near-linear and are smooth,
# so gradients still flow back into the raw scores
SORTER_FEATURES = 16
SORTER_TAU = 0.04
_SORTER_CENTERS = np.linspace(0.0, 1.0, SORTER_FEATURES)


def _featurize_array(z: np.ndarray) -> np.ndarray:
    """[...]-shaped normalized scores -> [..., K] soft threshold activations."""
    return 1.0 / (1.0 + np.exp(-(z[..., None] - _SORTER_CENTERS) / SORTER_TAU))


def _featurize_tensor(z: Tensor) -> Tensor:
    """Differentiable counterpart of _featurize_array for a [N] score vector."""
    col = ad.reshape(z, (z.data.size, 1))
    return ad.sigmoid(ad.mul(ad.sub(col, Tensor(_SORTER_CENTERS)), 1.0 / SORTER_TAU))


class Sorter:
    """Recurrent proxy of the fractional-rank operator for fixed length N.

    Maps a min-max normalized score sequence to approximate normalized ranks
    in [0, 1]. Parameters are frozen after training; gradients only flow back
    into the scores.
    """

    def __init__(self, n: int, hidden: int = 32):
        if n < 2:
            raise ValueError("sorter requires sequence length >= 2")
        self.n = n
        self.hidden = hidden
        self.fwd = LSTMParams(SORTER_FEATURES, hidden, "sorter.fwd")
        self.bwd = LSTMParams(SORTER_FEATURES, hidden, "sorter.bwd")
        self.w_out = ad.parameter(np.zeros((2 * hidden, 1)), "sorter.w_out", init="he", decay=True)
        self.b_out = ad.parameter(np.zeros(1), "sorter.b_out", init="zero", decay=False)
        self.trained = False
        self.holdout_rank_mae = float("nan")

    def parameters(self):
        yield from self.fwd.tensors()
        yield from self.bwd.tensors()
        yield self.w_out
        yield self.b_out

    def freeze(self):
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
        self.trained = True

    def _forward(self, z: Tensor) -> Tensor:
        """[T, B, K] featurized scores -> [T, B] approximate normalized ranks."""
        t_len, batch, _ = z.data.shape
        h = ad.lstm_sequence(z, self.fwd, self.bwd)              # [T, B, 2H]
        flat = ad.reshape(h, (t_len * batch, 2 * self.hidden))
        out = ad.linear(flat, self.w_out, self.b_out)             # [T*B, 1]
        return ad.reshape(out, (t_len, batch))

    def apply(self, scores) -> Tensor:
        """Differentiable approximate normalized ranks of a length-N score vector."""
        scores = as_tensor(scores)
        if scores.data.ndim != 1 or scores.data.size != self.n:
            raise ValueError(f"sorter was trained for length {self.n}, got shape {scores.data.shape}")
        if not self.trained:
            raise ValueError("sorter has not been trained")
        z = _minmax_normalize_tensor(scores)
        feats = ad.reshape(_featurize_tensor(z), (self.n, 1, SORTER_FEATURES))
        return ad.reshape(self._forward(feats), (self.n,))

    # -- persistence --------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {p.name: p.data for p in self.parameters()}

    def save(self, path):
        serialization.write_weights(path, self.state_arrays(),
                                    version=serialization.SORTER_VERSION,
                                    header=(self.n, self.hidden))

    @classmethod
    def load(cls, path) -> "Sorter":
        arrays, (n, hidden) = serialization.read_weights(
            path, expect_version=serialization.SORTER_VERSION, header_fields=2)
        sorter = cls(n, hidden)
        for p in sorter.parameters():
            if p.name not in arrays:
                raise serialization.FormatError(f"missing sorter record {p.name!r}")
            if arrays[p.name].shape != p.data.shape:
                raise serialization.FormatError(
                    f"sorter record {p.name!r} has shape {arrays[p.name].shape}, "
                    f"expected {p.data.shape}")
            p.data[...] = arrays[p.name]
        sorter.freeze()
        return sorter


def sorter_apply(sorter: Sorter, scores) -> Tensor:
    return sorter.apply(scores)


def synthetic_rank_sequences(n: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """Training mixture: uniform, clipped Gaussian, sorted-plus-noise, duplicates."""
    kinds = np.arange(count) % 4
    seqs = np.empty((count, n))
    for idx in range(count):
        kind = kinds[idx]
        if kind == 0:
            seqs[idx] = rng.uniform(0.0, 1.0, n)
        elif kind == 1:
            seqs[idx] = np.clip(rng.normal(0.5, 0.15, n), 0.0, 1.0)
        elif kind == 2:
            base = np.sort(rng.uniform(0.0, 1.0, n))
            if rng.random() < 0.5:
                base = base[::-1]
            seqs[idx] = base + rng.normal(0.0, 0.05, n)
        else:
            vals = rng.uniform(0.0, 1.0, n)
            dup = rng.integers(2, max(3, n // 4) + 1)
            src = rng.integers(0, n)
            dst = rng.choice(n, size=dup, replace=False)
            vals[dst] = vals[src]
            seqs[idx] = vals
    return seqs


def _normalized_rank_targets(seqs: np.ndarray) -> np.ndarray:
    n = seqs.shape[1]
    targets = np.empty_like(seqs)
    for i in range(seqs.shape[0]):
        targets[i] = (fractional_rank(seqs[i]) - 1.0) / (n - 1.0)
    return targets


def sorter_train(n: int, n_sequences: int = 50_000, seed: int = 0, hidden: int = 32,
                 batch_size: int = 64, epochs: int = 6, lr: float = 1e-3,
                 holdout: int = 2000, verbose: bool = False) -> Sorter:
    """Train the rank proxy on synthetic sequences against fractional-rank targets.

    Targets are normalized to [0, 1] by (rank - 1)/(N - 1). The held-out mean
    absolute rank error (in rank units) is stored on the returned sorter.
    """
    if n < 2:
        raise ValueError("sorter_train requires N >= 2")
    rng = np.random.default_rng(seed)
    sorter = Sorter(n, hidden)
    he_init(sorter.parameters(), seed=int(rng.integers(0, 2**31)))
    # forget-gate bias of 1 keeps early gradients flowing through the recurrence
    sorter.fwd.bias.data[hidden:2 * hidden] = 1.0
    sorter.bwd.bias.data[hidden:2 * hidden] = 1.0
    seqs = synthetic_rank_sequences(n, n_sequences, rng)
    targets = _normalized_rank_targets(seqs)
    normalized = _minmax_normalize_batch(seqs)

    opt = Adam(list(sorter.parameters()), lr=lr)
    steps_per_epoch = n_sequences // batch_size
    for epoch in range(epochs):
        perm = rng.permutation(n_sequences)
        for step in range(steps_per_epoch):
            batch = perm[step * batch_size:(step + 1) * batch_size]
            z = _featurize_array(normalized[batch].T)     # [T, B, K]
            t = targets[batch].T                          # [T, B]
            opt.zero_grad()
            with ad.record():
                pred = sorter._forward(Tensor(z))
                loss = ad.mean_all(ad.square(ad.sub(pred, Tensor(t))))
                ad.backward(loss)
            opt.step()
        if verbose:
            print(f"sorter epoch {epoch}: loss {loss.item():.5f}")

    sorter.freeze()
    sorter.holdout_rank_mae = evaluate_sorter(sorter, rng, holdout)
    return sorter


def evaluate_sorter(sorter: Sorter, rng: np.random.Generator, count: int = 2000) -> float:
    """Held-out mean absolute rank error in rank units (1..N scale)."""
    seqs = synthetic_rank_sequences(sorter.n, count, rng)
    targets = _normalized_rank_targets(seqs)
    normalized = _minmax_normalize_batch(seqs)
    errs = []
    with ad.no_grad():
        for start in range(0, count, 256):
            chunk = slice(start, min(start + 256, count))
            z = _featurize_array(normalized[chunk].T)
            pred = sorter._forward(Tensor(z)).data.T   # [B, N] normalized ranks
            true = targets[chunk]
            errs.append(np.abs(pred - true) * (sorter.n - 1.0))
    return float(np.concatenate(errs).mean())


# ---------------------------------------------------------------------------
# combined objective

@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 10.0
    lambda2: float = 10.0

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")


def rank_loss(y_hat, y, sorter: Sorter) -> Tensor:
    """Sum of squared differences between proxy ranks of estimates and targets.

    The sorter is applied to both vectors; gradients flow only through the
    estimates (targets are constants and the sorter is frozen).
    """
    y_hat = as_tensor(y_hat)
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64)
    if y_hat.data.shape != y.shape:
        raise ValueError("rank_loss expects equal-length vectors")
    r_hat = sorter.apply(y_hat)
    with ad.no_grad():
        r_true = sorter.apply(Tensor(y)).data
    return ad.sum_all(ad.square(ad.sub(r_hat, Tensor(r_true))))


def total_loss(y_hat, y, sorter: Sorter | None, weights: LossWeights) -> Tensor:
    """MSE + lambda1 * age-difference loss + lambda2 * rank loss."""
    loss = mse_loss(y_hat, y)
    if weights.lambda1 > 0:
        loss = ad.add(loss, ad.mul(age_difference_loss(y_hat, y), weights.lambda1))
    if weights.lambda2 > 0:
        if sorter is None:
            raise ValueError("total_loss with lambda2 > 0 requires a trained sorter")
        loss = ad.add(loss, ad.mul(rank_loss(y_hat, y, sorter), weights.lambda2))
    return loss
