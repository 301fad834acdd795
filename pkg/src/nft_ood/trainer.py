"""AdamW optimizer, batch construction and the few-shot training loop."""

import csv
import hashlib
import io
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import EmptyTrainingSet, InvalidConfig, ShapeMismatch
from .model import Checkpoint
from .objectives import KR_SCOPES, KR_VARIANTS, Batch, backward


@dataclass
class TrainConfig:
    lambda1: float = 0.3
    lambda2: float = 100.0
    lr: float = 1e-5
    epochs: int = 3
    batch_size: int = 32
    tau_loss: float = 0.01
    seed: int = 0
    kr_variant: str = "feature"
    kr_scope: str = "both"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-2

    def __post_init__(self):
        if self.lr <= 0:
            raise InvalidConfig(f"lr must be > 0, got {self.lr}")
        if self.epochs < 1:
            raise InvalidConfig(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise InvalidConfig(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise InvalidConfig("lambda weights must be >= 0")
        if self.tau_loss <= 0:
            raise InvalidConfig(f"tau_loss must be > 0, got {self.tau_loss}")
        if self.kr_variant not in KR_VARIANTS:
            raise InvalidConfig(f"unknown kr_variant {self.kr_variant!r}")
        if self.kr_scope not in KR_SCOPES:
            raise InvalidConfig(f"unknown kr_scope {self.kr_scope!r}")


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0


# alpha parameters rest at 1, not 0; decoupled decay pulls them toward 1
_ALPHA_KEYS = ("pos_head.alpha", "neg_head.alpha")


def init_optimizer(state):
    params = state.params()
    return OptimizerState(
        m={k: np.zeros_like(a) for k, a in params.items()},
        v={k: np.zeros_like(a) for k, a in params.items()},
        step=0,
    )


def adamw_step(params, grads, opt, cfg):
    """One AdamW update with bias correction and decoupled weight decay."""
    opt.step += 1
    t = opt.step
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for key, p in params.items():
        g = grads[key]
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient shape mismatch for {key}")
        m = opt.m[key]
        v = opt.v[key]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        rest = 1.0 if key in _ALPHA_KEYS else 0.0
        p -= cfg.lr * (m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
                       + cfg.weight_decay * (p - rest))


def _epoch_rng(seed, epoch):
    return np.random.Generator(
        np.random.Philox(key=np.array([seed, epoch], dtype=np.uint64))
    )


def make_batches(train, batch_size, seed, epoch=0):
    """Shuffled batches of ceil(bs/2) positives and floor(bs/2) negatives.

    Sampling is without replacement within the epoch; the last partial batch
    is kept. If one side of the training set is empty, batches consist of
    the other side only.
    """
    if train.n_pos == 0 and train.n_neg == 0:
        raise EmptyTrainingSet("training set is empty")
    if train.n_pos and train.n_neg and batch_size < 2:
        raise InvalidConfig("batch_size must be >= 2 with both sample kinds present")
    rng = _epoch_rng(seed, epoch)
    pos_order = rng.permutation(train.n_pos) if train.n_pos else np.array([], dtype=int)
    neg_order = rng.permutation(train.n_neg) if train.n_neg else np.array([], dtype=int)
    if train.n_pos and train.n_neg:
        pos_per = (batch_size + 1) // 2
        neg_per = batch_size // 2
    else:
        pos_per = batch_size
        neg_per = batch_size
    n_batches = max(
        -(-train.n_pos // pos_per) if train.n_pos else 0,
        -(-train.n_neg // neg_per) if train.n_neg else 0,
    )
    batches = []
    for b in range(n_batches):
        pi = pos_order[b * pos_per : (b + 1) * pos_per]
        ni = neg_order[b * neg_per : (b + 1) * neg_per]
        batches.append(
            Batch(
                pos_features=train.pos_features[pi],
                pos_labels=train.pos_labels[pi],
                neg_features=train.neg_features[ni],
            )
        )
    return batches


@dataclass
class LossTrace:
    records: list = field(default_factory=list)  # (epoch, step, LossReport)

    def append(self, epoch, step, report):
        self.records.append((epoch, step, report))

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "step", "l_pos", "l_neg", "l_kr", "total"])
        for epoch, step, r in self.records:
            w.writerow([epoch, step,
                        repr(r.l_pos), repr(r.l_neg), repr(r.l_kr), repr(r.total)])
        return buf.getvalue()

    def save_csv(self, path):
        with open(path, "w", newline="") as f:
            f.write(self.to_csv())

    def digest(self):
        return hashlib.sha256(self.to_csv().encode("utf-8")).hexdigest()

    def epoch_mean_totals(self):
        by_epoch = {}
        for epoch, _, r in self.records:
            by_epoch.setdefault(epoch, []).append(r.total)
        return {e: float(np.mean(vs)) for e, vs in sorted(by_epoch.items())}


def train(state, bank, train_set, cfg):
    """Run the full training loop in place; returns (Checkpoint, LossTrace)."""
    if train_set.n_pos and train_set.pos_features.shape[1] != bank.dim:
        raise ShapeMismatch("training features do not match bank dimension")
    opt = init_optimizer(state)
    params = state.params()
    trace = LossTrace()
    step = 0
    for epoch in range(cfg.epochs):
        for batch in make_batches(train_set, cfg.batch_size, cfg.seed, epoch):
            report, grads = backward(state, bank, batch, cfg)
            adamw_step(params, grads, opt, cfg)
            trace.append(epoch, step, report)
            step += 1
    ckpt = Checkpoint(
        model=state,
        config=asdict(cfg),
        meta={"seed": cfg.seed, "trace_digest": trace.digest(), "steps": step},
    )
    return ckpt, trace
