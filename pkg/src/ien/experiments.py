"""End-to-end runs behind the ``ablate`` and ``bench`` commands, plus the
memoryless reference classifier used to confirm that ``early_only`` data
needs memory."""

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .cells import CellParams, unroll
from .datagen import StreamSpec, generate_stream, segment_windows
from .metrics import EvalSet, mean_average_precision, mean_calibrated_ap
from .network import IenConfig, IenModel, padded_windows, predict_current, train
from .numerics import Parameter, adam_step, make_rng, one_hot, softmax

ABLATION_ORDER = ("lstm_plain", "lstm_bundle", "lstm_sophisticated", "ieu")

# mAP (%) on THUMOS-14 for the same four units, in ABLATION_ORDER.
REFERENCE_ABLATION_MAP = {"lstm_plain": 58.5, "lstm_bundle": 58.9, "lstm_sophisticated": 59.4, "ieu": 60.4}
REFERENCE_SPEED_DELTA_PCT = -12.57


def evaluate_stream(model, stream):
    """Final-chunk predictions over a whole stream, with zero-padded warm-up windows."""
    probs = predict_current(model, padded_windows(stream.feats, model.config.T_plus_1))
    ev = EvalSet(probs, stream.labels)
    return probs, mean_average_precision(ev), mean_calibrated_ap(ev)


@dataclass
class AblationConfig:
    K: int = 3
    d_v: int = 16
    d_e: int = 32
    d_h: int = 32
    T_plus_1: int = 8
    train_len: int = 16000
    val_len: int = 4000  # 0 disables epoch selection; the last epoch is kept
    test_len: int = 4000
    evidence_mode: str = "early_only"
    episode_len_range: tuple = (8, 16)
    background_rate: float = 0.5
    noise_sigma: float = 0.5
    epochs: int = 8  # upper bound when selecting by validation
    batch_size: int = 32
    lr: float = 1e-3
    seeds: tuple = tuple(range(10))
    variants: tuple = ABLATION_ORDER


@dataclass
class AblationResult:
    config: AblationConfig
    map_by_seed: dict = field(default_factory=dict)  # variant -> [mAP per seed]
    mcap_by_seed: dict = field(default_factory=dict)
    epoch_by_seed: dict = field(default_factory=dict)  # selected epoch (1-based)
    memoryless_map: list = field(default_factory=list)

    def mean_map(self, variant):
        return float(np.mean(self.map_by_seed[variant]))

    def mean_mcap(self, variant):
        return float(np.mean(self.mcap_by_seed[variant]))

    def ordering_matches_reference(self):
        means = [self.mean_map(v) for v in ABLATION_ORDER if v in self.map_by_seed]
        return all(a <= b for a, b in zip(means, means[1:]))

    def to_dict(self):
        cfg = asdict(self.config)
        cfg["episode_len_range"] = list(cfg["episode_len_range"])
        cfg["seeds"] = list(cfg["seeds"])
        cfg["variants"] = list(cfg["variants"])
        return {
            "config": cfg,
            "map_by_seed": {v: self.map_by_seed[v] for v in self.config.variants},
            "mcap_by_seed": {v: self.mcap_by_seed[v] for v in self.config.variants},
            "mean_map": {v: self.mean_map(v) for v in self.config.variants},
            "mean_mcap": {v: self.mean_mcap(v) for v in self.config.variants},
            "epoch_by_seed": {v: self.epoch_by_seed[v] for v in self.config.variants},
            "memoryless_map": self.memoryless_map,
            "reference_thumos14_map_pct": REFERENCE_ABLATION_MAP,
            "ordering_matches_reference": self.ordering_matches_reference(),
        }


def ablation_streams(cfg, seed):
    """Train, test and (if ``val_len``) validation streams sharing one seed's prototypes."""
    base = dict(K=cfg.K, d_v=cfg.d_v, episode_len_range=tuple(cfg.episode_len_range),
                background_rate=cfg.background_rate, evidence_mode=cfg.evidence_mode,
                noise_sigma=cfg.noise_sigma, seed=seed, min_len=cfg.T_plus_1)
    train_stream = generate_stream(StreamSpec(stream_len=cfg.train_len, split=0, **base))
    test_stream = generate_stream(StreamSpec(stream_len=cfg.test_len, split=1, **base))
    val_stream = generate_stream(StreamSpec(stream_len=cfg.val_len, split=2, **base)) if cfg.val_len else None
    return train_stream, test_stream, val_stream


def train_variant(cfg, variant, train_stream, seed, val_stream=None):
    """Train one variant; with ``val_stream``, keep the epoch with the best validation mAP.

    Returns ``(model, losses, selected_epoch)``.
    """
    model = IenModel.init(IenConfig(cfg.T_plus_1, cfg.d_v, cfg.d_e, cfg.d_h, cfg.K, variant), rng=seed)
    segs = segment_windows(train_stream, cfg.T_plus_1)
    best = {"map": -np.inf, "epoch": cfg.epochs, "values": None}

    def select(epoch, loss):
        score = evaluate_stream(model, val_stream)[1].mean
        if score > best["map"]:
            best.update(map=score, epoch=epoch + 1, values=[p.value.copy() for p in model.parameters()])

    result = train(model, segs.feats, segs.labels, epochs=cfg.epochs, batch_size=cfg.batch_size,
                   lr=cfg.lr, rng=seed, callback=select if val_stream is not None else None)
    if best["values"] is not None:
        for p, v in zip(model.parameters(), best["values"]):
            p.value[...] = v
    return model, result.losses, best["epoch"]


def run_ablation(cfg, log=None, memoryless=True, streams=None):
    """Train every variant on identical data and seeds; score final-chunk mAP/mcAP.

    By default each seed draws its own synthetic streams. ``streams`` may
    instead fix ``(train, test, val)`` for all seeds (``val`` may be None), in
    which case the seed only changes initialization and batch order.
    """
    result = AblationResult(cfg)
    for seed in cfg.seeds:
        train_stream, test_stream, val_stream = streams if streams is not None else ablation_streams(cfg, seed)
        for variant in cfg.variants:
            model, _, epoch = train_variant(cfg, variant, train_stream, seed, val_stream)
            _, ap, cap = evaluate_stream(model, test_stream)
            result.map_by_seed.setdefault(variant, []).append(ap.mean)
            result.mcap_by_seed.setdefault(variant, []).append(cap.mean)
            result.epoch_by_seed.setdefault(variant, []).append(epoch)
            if log:
                log(f"seed={seed} variant={variant} epoch={epoch} mAP={ap.mean:.4f} mcAP={cap.mean:.4f}")
        if memoryless:
            clf = MemorylessClassifier.fit(train_stream, rng=seed)
            ev = EvalSet(clf.predict(test_stream.feats), test_stream.labels)
            result.memoryless_map.append(mean_average_precision(ev).mean)
    return result


@dataclass
class MemorylessClassifier:
    """Multinomial logistic regression on the current chunk alone."""

    W: np.ndarray  # (K+1) x (d_v + 1), last column is the bias

    @classmethod
    def fit(cls, stream, steps=2000, lr=0.05, rng=0):
        X = np.hstack([stream.feats, np.ones((len(stream), 1))])
        Y = one_hot(stream.labels, stream.K + 1)
        W = Parameter(make_rng(rng).normal(0, 0.01, size=(stream.K + 1, X.shape[1])), "W_memoryless")
        for t in range(1, steps + 1):
            P = softmax(X @ W.value.T)
            W.grad[...] = (P - Y).T @ X / len(X)
            adam_step(W, lr, t=t)
        return cls(W.value)

    def predict(self, feats):
        return softmax(np.hstack([feats, np.ones((len(feats), 1))]) @ self.W.T)


@dataclass
class BenchResult:
    variant: str
    steps_per_sec: float  # recurrent-cell steps (one chunk each) per second
    windows_per_sec: float
    seconds: float


def run_benchmark(d_e=512, d_h=512, T_plus_1=8, batch=1, duration=10.0, warmup=1.0,
                  variants=("lstm_plain", "ieu"), dtype=np.float32, seed=0, slice_seconds=0.5):
    """Forward-only throughput of the recurrent core for each variant.

    Variants are timed in alternating slices so drift in machine load is
    shared between them; each accumulates ``duration`` seconds in total.
    """
    rng = make_rng(seed)
    cells = {v: CellParams.init(v, d_h, d_e, rng=rng, dtype=dtype) for v in variants}
    xs = rng.standard_normal((batch, T_plus_1, d_e)).astype(dtype)
    if batch == 1:
        xs = xs[0]
    for v in variants:
        end = time.perf_counter() + warmup
        while time.perf_counter() < end:
            unroll(cells[v], xs)
    calls = {v: 0 for v in variants}
    spent = {v: 0.0 for v in variants}
    while min(spent.values()) < duration:
        for v in variants:
            start = time.perf_counter()
            stop = start + slice_seconds
            n = 0
            now = start
            while now < stop:
                unroll(cells[v], xs)
                n += 1
                now = time.perf_counter()
            calls[v] += n
            spent[v] += now - start
    out = {}
    for v in variants:
        windows = calls[v] * batch / spent[v]
        out[v] = BenchResult(v, windows * T_plus_1, windows, spent[v])
    return out


def speed_delta_pct(results, base="lstm_plain", other="ieu"):
    return 100.0 * (results[other].steps_per_sec - results[base].steps_per_sec) / results[base].steps_per_sec

