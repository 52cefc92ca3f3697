"""Limit order book data pipeline.

An event series stores ten levels per side in canonical feature order
[ask price, ask volume, bid price, bid volume] per level, 40 columns
total, one row per tick-time event.  Labeling compares the mean of the
next k mid-prices against the current mid with a proportional threshold
alpha; windows are the 40 most recent snapshots ending at the anchor.

The synthetic generator plants a learnable dependency: a persistent
hidden regime drives both the near-future mid drift and the volume
imbalance at book levels 1-2, so the label is (up to regime switches and
noise) a deterministic function of visible features.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import BoundaryError, ConfigError, DataError

N_LEVELS = 10
N_FEATURES = 4 * N_LEVELS
WINDOW_ROWS = 40

LABEL_DOWN, LABEL_STATIONARY, LABEL_UP = 0, 1, 2
LABEL_NAMES = ("down", "stationary", "up")
EXPORT_CODES = {LABEL_DOWN: -1, LABEL_STATIONARY: 0, LABEL_UP: 1}

CSV_HEADER = "ts," + ",".join(
    f"{kind}{level}" for level in range(1, N_LEVELS + 1) for kind in ("pa", "va", "pb", "vb")
)

# column index helpers into the 40-feature layout
def ask_price_col(level):
    return 4 * (level - 1)


def ask_volume_col(level):
    return 4 * (level - 1) + 1


def bid_price_col(level):
    return 4 * (level - 1) + 2


def bid_volume_col(level):
    return 4 * (level - 1) + 3


@dataclass
class LobSnapshot:
    """One book event: timestamp plus the 40 canonical features."""

    timestamp: int
    features: np.ndarray

    def ask_price(self, level=1):
        return float(self.features[ask_price_col(level)])

    def ask_volume(self, level=1):
        return float(self.features[ask_volume_col(level)])

    def bid_price(self, level=1):
        return float(self.features[bid_price_col(level)])

    def bid_volume(self, level=1):
        return float(self.features[bid_volume_col(level)])


@dataclass
class LobEventSeries:
    """Time-ordered book snapshots with optional day annotations."""

    timestamps: np.ndarray  # [T] event indices
    features: np.ndarray  # [T, 40] float
    days: np.ndarray | None = None  # [T] day ids, ascending
    regimes: np.ndarray | None = None  # planted signal, synthetic data only

    def __len__(self):
        return len(self.timestamps)

    def snapshot(self, t):
        return LobSnapshot(int(self.timestamps[t]), self.features[t])

    def validate(self):
        validate_books(self.features)
        return self


def validate_books(features):
    """Raise DataError naming the first event whose book is invalid."""
    feats = np.asarray(features)
    if feats.ndim != 2 or feats.shape[1] != N_FEATURES:
        raise DataError(f"expected [events, {N_FEATURES}] features, got {feats.shape}")
    ask_p = feats[:, [ask_price_col(i) for i in range(1, N_LEVELS + 1)]]
    bid_p = feats[:, [bid_price_col(i) for i in range(1, N_LEVELS + 1)]]
    volumes = feats[:, [ask_volume_col(i) for i in range(1, N_LEVELS + 1)]
                    + [bid_volume_col(i) for i in range(1, N_LEVELS + 1)]]
    crossed = ask_p[:, 0] < bid_p[:, 0]
    if crossed.any():
        t = int(np.argmax(crossed))
        raise DataError(
            f"event {t}: crossed book (best ask {ask_p[t, 0]} < best bid {bid_p[t, 0]})"
        )
    if (ask_p[:, 1:] < ask_p[:, :-1]).any():
        t = int(np.argmax((ask_p[:, 1:] < ask_p[:, :-1]).any(axis=1)))
        raise DataError(f"event {t}: ask prices not non-decreasing across levels")
    if (bid_p[:, 1:] > bid_p[:, :-1]).any():
        t = int(np.argmax((bid_p[:, 1:] > bid_p[:, :-1]).any(axis=1)))
        raise DataError(f"event {t}: bid prices not non-increasing across levels")
    if (feats[:, [ask_price_col(i) for i in range(1, N_LEVELS + 1)]] <= 0).any():
        raise DataError("non-positive ask price encountered")
    if (volumes < 0).any():
        raise DataError("negative volume encountered")


def mid_price(snapshot):
    """Midpoint of best ask and best bid."""
    pa, pb = snapshot.ask_price(1), snapshot.bid_price(1)
    if pa < pb:
        raise DataError(f"crossed book (best ask {pa} < best bid {pb})")
    return (pa + pb) / 2.0


def mid_price_series(series):
    """Vectorized mid-price over all events."""
    feats = series.features
    return (feats[:, ask_price_col(1)] + feats[:, bid_price_col(1)]) / 2.0


def smoothed_future_mid(series, t, k):
    """Mean of the next k mid-prices p(t+1)..p(t+k)."""
    if k < 1:
        raise ConfigError(f"horizon k must be >= 1, got {k}")
    if t + k >= len(series):
        raise BoundaryError(
            f"anchor {t} with horizon {k} needs event {t + k}, series has {len(series)}"
        )
    mids = mid_price_series(series)
    return float(mids[t + 1 : t + k + 1].mean())


def direction_label(series, t, k, alpha):
    """Three-way label from the proportional change of the smoothed mid."""
    p_now = mid_price(series.snapshot(t))
    m = smoothed_future_mid(series, t, k)
    d = (m - p_now) / p_now
    if d > alpha:
        return LABEL_UP
    if d < -alpha:
        return LABEL_DOWN
    return LABEL_STATIONARY


@dataclass
class WindowSet:
    """Labeled 40x40 windows for one horizon, anchored in one series."""

    windows: np.ndarray  # [n, 40, 40] float32, rows oldest first
    labels: np.ndarray  # [n] int64 in {0, 1, 2}
    anchors: np.ndarray  # [n] event index of the newest row
    horizon: int
    alpha: float

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, idx):
        return LabeledWindow(
            matrix=self.windows[idx],
            label=int(self.labels[idx]),
            horizon=self.horizon,
            anchor=int(self.anchors[idx]),
        )

    def subset(self, idx):
        return WindowSet(self.windows[idx], self.labels[idx], self.anchors[idx],
                         self.horizon, self.alpha)

    def class_counts(self):
        return np.bincount(self.labels, minlength=3)


@dataclass
class LabeledWindow:
    matrix: np.ndarray
    label: int
    horizon: int
    anchor: int


def label_series(series, k, alpha):
    """Labels for every admissible anchor; returns (anchors, labels)."""
    n = len(series)
    first = WINDOW_ROWS - 1
    last = n - 1 - k
    if last < first:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    mids = mid_price_series(series)
    csum = np.concatenate(([0.0], np.cumsum(mids)))
    anchors = np.arange(first, last + 1)
    future_mean = (csum[anchors + 1 + k] - csum[anchors + 1]) / k
    d = (future_mean - mids[anchors]) / mids[anchors]
    labels = np.full(len(anchors), LABEL_STATIONARY, dtype=np.int64)
    labels[d > alpha] = LABEL_UP
    labels[d < -alpha] = LABEL_DOWN
    return anchors, labels


def build_windows(series, k, alpha):
    """One window per anchor with full history and future; short series warn."""
    anchors, labels = label_series(series, k, alpha)
    if len(anchors) == 0:
        warnings.warn(
            f"series of {len(series)} events is too short for windows with k={k}",
            stacklevel=2,
        )
        return WindowSet(
            np.empty((0, WINDOW_ROWS, N_FEATURES), dtype=np.float32),
            labels, anchors, k, alpha,
        )
    strided = np.lib.stride_tricks.sliding_window_view(
        series.features, WINDOW_ROWS, axis=0
    )  # [T-39, 40 features, 40 rows]
    windows = strided[anchors - (WINDOW_ROWS - 1)].transpose(0, 2, 1)
    return WindowSet(np.ascontiguousarray(windows, dtype=np.float32),
                     labels, anchors, k, alpha)


@dataclass
class DatasetSplit:
    """Half-open event index ranges; test strictly follows train and val."""

    train: tuple
    val: tuple
    test: tuple
    day_boundaries: list = field(default_factory=list)

    def ranges(self):
        return {"train": self.train, "val": self.val, "test": self.test}


def split_series(series, train_days=7, test_days=3, val_fraction=0.2):
    """Day-based split when day ids exist, else 70/30 by event count.

    Validation is always the final fraction of the training segment.
    """
    n = len(series)
    if series.days is not None:
        days = np.asarray(series.days)
        uniq = np.unique(days)
        if len(uniq) != train_days + test_days:
            raise ConfigError(
                f"need exactly {train_days + test_days} labeled days, got {len(uniq)}"
            )
        boundary_day = uniq[train_days]
        test_start = int(np.argmax(days >= boundary_day))
        train_end = test_start
        boundaries = [int(np.argmax(days >= d)) for d in uniq]
    else:
        train_end = int(round(n * 0.7))
        test_start = train_end
        boundaries = []
    val_start = train_end - int(round(train_end * val_fraction))
    if val_start <= 0 or val_start >= train_end or test_start >= n:
        raise ConfigError(f"series of {n} events is too small to split")
    return DatasetSplit(
        train=(0, val_start),
        val=(val_start, train_end),
        test=(test_start, n),
        day_boundaries=boundaries,
    )


def slice_series(series, index_range):
    lo, hi = index_range
    return LobEventSeries(
        timestamps=series.timestamps[lo:hi],
        features=series.features[lo:hi],
        days=None if series.days is None else series.days[lo:hi],
        regimes=None if series.regimes is None else series.regimes[lo:hi],
    )


@dataclass
class FeatureStats:
    """Per-feature z-score statistics; std floored at 1e-8."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def from_windows(cls, window_set):
        rows = window_set.windows.reshape(-1, N_FEATURES).astype(np.float64)
        mean = rows.mean(axis=0)
        std = np.maximum(rows.std(axis=0), 1e-8)
        return cls(mean.astype(np.float32), std.astype(np.float32))

    def to_pairs(self, prefix="norm."):
        from .configio import fmt_float

        return {
            prefix + "mean": ",".join(fmt_float(x) for x in self.mean),
            prefix + "std": ",".join(fmt_float(x) for x in self.std),
        }

    @classmethod
    def from_pairs(cls, pairs, prefix="norm."):
        if prefix + "mean" not in pairs:
            return None
        mean = np.array([float(x) for x in pairs[prefix + "mean"].split(",")], dtype=np.float32)
        std = np.array([float(x) for x in pairs[prefix + "std"].split(",")], dtype=np.float32)
        return cls(mean, std)


def normalize_windows(window_set, stats):
    """z-score every window with train-segment statistics."""
    normed = (window_set.windows - stats.mean) / stats.std
    return WindowSet(normed.astype(np.float32), window_set.labels, window_set.anchors,
                     window_set.horizon, window_set.alpha)


def denormalize_windows(window_set, stats):
    raw = window_set.windows * stats.std + stats.mean
    return WindowSet(raw.astype(np.float32), window_set.labels, window_set.anchors,
                     window_set.horizon, window_set.alpha)


def permute_features(window_set, permutation):
    """Reorder feature columns identically in every window; labels unchanged.

    permutation[j] names the source column placed at position j.
    """
    perm = np.asarray(permutation)
    if perm.shape != (N_FEATURES,) or not np.array_equal(
        np.sort(perm), np.arange(N_FEATURES)
    ):
        raise DataError(f"permutation must be a bijection of size {N_FEATURES}")
    return WindowSet(
        np.ascontiguousarray(window_set.windows[:, :, perm]),
        window_set.labels, window_set.anchors, window_set.horizon, window_set.alpha,
    )


def random_permutation(seed):
    return np.random.default_rng(seed).permutation(N_FEATURES)


def inverse_permutation(perm):
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm))
    return inv


@dataclass
class Datasets:
    """Normalized train/val/test windows sharing one stats object."""

    train: WindowSet
    val: WindowSet
    test: WindowSet
    stats: FeatureStats
    split: DatasetSplit


def prepare_datasets(series, k, alpha, split=None, normalize=True, stats=None):
    """Split the series, window each segment, z-score with train stats.

    Windows are built inside each segment independently, so no window's
    input rows or label horizon straddles a boundary.
    """
    if split is None:
        split = split_series(series)
    parts = {}
    for name, rng_ in split.ranges().items():
        parts[name] = build_windows(slice_series(series, rng_), k, alpha)
    if stats is None:
        stats = FeatureStats.from_windows(parts["train"])
    if normalize:
        parts = {name: normalize_windows(ws, stats) for name, ws in parts.items()}
    return Datasets(parts["train"], parts["val"], parts["test"], stats, split)


# ---------------------------------------------------------------------------
# synthetic generation


@dataclass
class SynthConfig:
    """Planted-signal generator settings.

    The hidden regime in {-1, 0, +1} persists for a geometric number of
    events (mean `persistence`).  Per event the mid moves by
    signal_strength * drift * regime relative units plus `noise` relative
    Gaussian units, and the volumes at levels 1-2 tilt by
    exp(+-imbalance * signal_strength * regime).  With signal_strength=1
    and noise=0 the label is a deterministic function of the level-1/2
    volume imbalance except at regime switches inside the horizon.
    """

    events: int = 12000
    signal_strength: float = 1.0
    noise: float = 0.0002
    drift: float = 0.001
    persistence: int = 150
    imbalance: float = 0.8
    volume_noise: float = 0.15
    base_price: float = 1000.0
    tick: float = 0.01
    base_volume: float = 100.0

    def to_pairs(self, prefix="synth."):
        from .configio import fmt_float

        return {
            prefix + "events": str(self.events),
            prefix + "signal_strength": fmt_float(self.signal_strength),
            prefix + "noise": fmt_float(self.noise),
            prefix + "drift": fmt_float(self.drift),
            prefix + "persistence": str(self.persistence),
            prefix + "imbalance": fmt_float(self.imbalance),
            prefix + "volume_noise": fmt_float(self.volume_noise),
            prefix + "base_price": fmt_float(self.base_price),
            prefix + "tick": fmt_float(self.tick),
            prefix + "base_volume": fmt_float(self.base_volume),
        }


def synth_generate(config, seed):
    """Synthetic event series with a planted, recoverable signal.

    Books are valid by construction: spread >= 1 tick, ask levels
    non-decreasing, bid levels non-increasing, volumes positive.
    """
    cfg = config
    if cfg.events < 1:
        raise ConfigError("events must be positive")
    rng = np.random.default_rng(seed)
    n = cfg.events

    # persistent hidden regime; a shuffled balanced cycle keeps the three
    # regimes near one third each over any few-run stretch
    regimes = np.empty(n, dtype=np.int64)
    pos = 0
    pool = []
    low = max(1, cfg.persistence // 2)
    high = max(low + 1, (3 * cfg.persistence) // 2)
    while pos < n:
        if not pool:
            pool = list(rng.permutation([-1, 0, 1]))
        run = int(rng.integers(low, high + 1))
        regimes[pos : pos + run] = pool.pop()
        pos += run

    # relative mid increments: planted drift plus noise
    steps = cfg.signal_strength * cfg.drift * regimes + cfg.noise * rng.standard_normal(n)
    log_mid = np.log(cfg.base_price) + np.concatenate(([0.0], np.cumsum(steps[:-1])))
    mid = np.exp(log_mid)

    # book construction on a tick grid
    half_spread = cfg.tick * rng.integers(1, 4, size=n)
    ask1 = np.ceil((mid + half_spread) / cfg.tick) * cfg.tick
    bid1 = np.floor((mid - half_spread) / cfg.tick) * cfg.tick
    bid1 = np.minimum(bid1, ask1 - cfg.tick)
    ask_gaps = rng.integers(1, 4, size=(n, N_LEVELS - 1)) * cfg.tick
    bid_gaps = rng.integers(1, 4, size=(n, N_LEVELS - 1)) * cfg.tick
    ask_prices = ask1[:, None] + np.concatenate(
        [np.zeros((n, 1)), np.cumsum(ask_gaps, axis=1)], axis=1
    )
    bid_prices = bid1[:, None] - np.concatenate(
        [np.zeros((n, 1)), np.cumsum(bid_gaps, axis=1)], axis=1
    )

    # volumes; levels 1-2 carry the imbalance signal
    tilt = cfg.imbalance * cfg.signal_strength * regimes
    ask_vol = cfg.base_volume * np.exp(
        cfg.volume_noise * rng.standard_normal((n, N_LEVELS))
    )
    bid_vol = cfg.base_volume * np.exp(
        cfg.volume_noise * rng.standard_normal((n, N_LEVELS))
    )
    for level in (0, 1):
        ask_vol[:, level] *= np.exp(-tilt)
        bid_vol[:, level] *= np.exp(tilt)

    feats = np.empty((n, N_FEATURES))
    for level in range(N_LEVELS):
        feats[:, 4 * level + 0] = ask_prices[:, level]
        feats[:, 4 * level + 1] = ask_vol[:, level]
        feats[:, 4 * level + 2] = bid_prices[:, level]
        feats[:, 4 * level + 3] = bid_vol[:, level]

    series = LobEventSeries(
        timestamps=np.arange(n, dtype=np.int64),
        features=feats,
        days=None,
        regimes=regimes,
    )
    series.validate()
    return series


def planted_signal_accuracy(series, k, alpha):
    """Accuracy of the generator's own optimal rule against actual labels.

    The optimal decision given the planted signal is to map the current
    regime (readable from the level-1/2 volume imbalance) straight to a
    label; mismatches come from regime switches inside the horizon and
    from noise near the threshold.  This is the documented ceiling for
    any classifier trained on the generated data.
    """
    if series.regimes is None:
        raise DataError("series carries no planted regimes")
    anchors, labels = label_series(series, k, alpha)
    if len(anchors) == 0:
        raise DataError("series too short to score")
    regime_to_label = {-1: LABEL_DOWN, 0: LABEL_STATIONARY, 1: LABEL_UP}
    predicted = np.array([regime_to_label[int(r)] for r in series.regimes[anchors]])
    return float((predicted == labels).mean())


# ---------------------------------------------------------------------------
# file formats


def export_csv(series, path):
    """Write the canonical CSV form."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(CSV_HEADER + "\n")
        for t in range(len(series)):
            row = ",".join(repr(float(x)) for x in series.features[t])
            fh.write(f"{int(series.timestamps[t])},{row}\n")


def ingest_csv(path):
    """Read the canonical CSV form, validating books."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header != CSV_HEADER:
            raise DataError(f"{path}: line 1: bad header, expected {CSV_HEADER!r}")
        timestamps = []
        rows = []
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != N_FEATURES + 1:
                raise DataError(
                    f"{path}: line {lineno}: expected {N_FEATURES + 1} fields, got {len(parts)}"
                )
            try:
                timestamps.append(int(float(parts[0])))
                rows.append([float(x) for x in parts[1:]])
            except ValueError as exc:
                raise DataError(f"{path}: line {lineno}: {exc}") from None
    if not rows:
        raise DataError(f"{path}: no events")
    series = LobEventSeries(
        timestamps=np.asarray(timestamps, dtype=np.int64),
        features=np.asarray(rows, dtype=np.float64),
    )
    series.validate()
    return series


def ingest_fi2010_matrix(path, feature_rows):
    """Read a whitespace-separated matrix with events as columns.

    feature_rows lists the 40 source row indices (0-based) holding the raw
    book features in canonical order; the layout of public files varies,
    so it is configuration, not a constant.
    """
    rows = list(feature_rows)
    if len(rows) != N_FEATURES:
        raise ConfigError(f"fi2010.feature_rows must list {N_FEATURES} rows, got {len(rows)}")
    try:
        matrix = np.loadtxt(path)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None
    if matrix.ndim == 1:
        matrix = matrix[:, None]
    if max(rows) >= matrix.shape[0] or min(rows) < 0:
        raise DataError(
            f"{path}: feature row index out of range for matrix with {matrix.shape[0]} rows"
        )
    feats = matrix[rows, :].T
    series = LobEventSeries(
        timestamps=np.arange(feats.shape[0], dtype=np.int64),
        features=np.asarray(feats, dtype=np.float64),
    )
    series.validate()
    return series


def ingest(path, fmt="canonical-csv", feature_rows=None):
    if fmt == "canonical-csv":
        return ingest_csv(path)
    if fmt == "fi2010-matrix":
        if feature_rows is None:
            raise ConfigError("fi2010-matrix format requires fi2010.feature_rows")
        return ingest_fi2010_matrix(path, feature_rows)
    raise ConfigError(f"unknown ingest format {fmt!r}")


def export_labels_csv(anchors, labels, k, path):
    """Label CSV `anchor_t,k,label` with codes -1/0/1 for down/stationary/up."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("anchor_t,k,label\n")
        for t, lab in zip(anchors, labels):
            fh.write(f"{int(t)},{k},{EXPORT_CODES[int(lab)]}\n")
