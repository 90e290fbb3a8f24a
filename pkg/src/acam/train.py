"""Training loop: data -> (optional ACAM) -> backbone -> cross-entropy, optimized with Adam."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .backbones import BackboneConfig, Classifier, build_backbone, forward_classify
from .checkpoint import load_checkpoint, save_checkpoint
from .contrast import PredictorWeights, RangeSpec, acam_forward, init_predictor
from .data import Dataset, batch_iter
from .diffcore import Tensor
from .rng import derive_seed, generator

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "train_loss", "train_acc", "test_acc", "seconds")


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 0.001
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    use_acam: bool = False
    K: int = 10
    freeze_stage1: bool = False
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr >= 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        for name in ("adam_beta1", "adam_beta2"):
            if not 0 <= getattr(self, name) < 1:
                raise ConfigError(f"{name} must lie in [0, 1), got {getattr(self, name)}")
        if self.adam_eps <= 0:
            raise ConfigError(f"adam_eps must be > 0, got {self.adam_eps}")
        if self.K < 1:
            raise ConfigError(f"K must be >= 1, got {self.K}")
        if self.freeze_stage1 and not self.use_acam:
            raise ConfigError("freeze_stage1 requires use_acam")


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState, cfg: TrainConfig
) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update; returns new parameter arrays, mutates ``state``.

    Only parameters present in ``grads`` move (frozen ones are simply omitted).
    """
    state.t += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    out = dict(params)
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"adam_step: gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * (g * g)
        state.m[name], state.v[name] = m, v
        step = (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        out[name] = (p - cfg.lr * step).astype(p.dtype, copy=False)
    return out


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    test_acc: float
    seconds: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def write_csv(self, path, wall_time: bool = False) -> None:
        """``seconds`` is left blank unless ``wall_time``, keeping the file reproducible."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(HISTORY_COLUMNS)
            for r in self.records:
                test = "" if np.isnan(r.test_acc) else f"{r.test_acc:.6f}"
                secs = f"{r.seconds:.3f}" if wall_time else ""
                w.writerow([r.epoch, f"{r.train_loss:.8f}", f"{r.train_acc:.6f}", test, secs])


@dataclass
class TrainResult:
    classifier: Classifier
    predictor: PredictorWeights | None
    history: TrainHistory
    range: RangeSpec = field(default_factory=RangeSpec)
    best_epoch: int | None = None


def freeze_stage1(predictor: PredictorWeights | None) -> set[str]:
    """Names of predictor parameters to hold fixed; gradients still flow through them."""
    if predictor is None:
        raise ConfigError("freeze_stage1 requires an ACAM predictor (use_acam)")
    return {f"predictor/{n}" for n in predictor.params}


def model_logits(classifier: Classifier, predictor: PredictorWeights | None, x: Tensor, rng_spec: RangeSpec,
                 capture: dict | None = None) -> Tensor:
    inp = acam_forward(x, predictor, rng_spec, capture) if predictor is not None else x
    return forward_classify(classifier, inp, capture)


def predict_proba(classifier, predictor, data: Dataset, rng_spec: RangeSpec = RangeSpec(), batch_size: int = 64):
    """Softmax scores [N, C] in manifest order."""
    dtype = classifier.params["head.weight"].dtype
    out = []
    with dc.no_grad():
        for x, _ in batch_iter(data, batch_size, shuffle=False, dtype=dtype):
            out.append(dc.softmax_np(model_logits(classifier, predictor, x, rng_spec).data.astype(np.float64)))
    return np.concatenate(out) if out else np.zeros((0, classifier.config.num_classes))


def _accuracy(classifier, predictor, data, rng_spec) -> float:
    if data is None or len(data) == 0:
        return float("nan")
    scores = predict_proba(classifier, predictor, data, rng_spec)
    return float(np.mean(scores.argmax(axis=1) == data.labels))


def _first_nonfinite(loss: Tensor) -> str:
    for node in dc.topological_order(loss):
        if not np.all(np.isfinite(node.data)):
            label = node.name or node.op
            return f"{label} (op={node.op}, shape={node.shape})"
    return "loss"


def _named_params(classifier, predictor) -> dict[str, Tensor]:
    named = {f"backbone/{n}": t for n, t in classifier.params.items()}
    if predictor is not None:
        named.update({f"predictor/{n}": t for n, t in predictor.params.items()})
    return named


def train_model(
    cfg: TrainConfig,
    backbone_cfg: BackboneConfig,
    train_data: Dataset,
    test_data: Dataset | None = None,
    rng_spec: RangeSpec = RangeSpec(),
    out_dir=None,
    meta: dict | None = None,
) -> TrainResult:
    """Train jointly end to end. Writes ``final.ckpt`` and ``best.ckpt`` when ``out_dir`` is set."""
    cfg.validate()
    backbone_cfg.validate()
    if len(train_data) == 0:
        raise ConfigError("training set is empty")
    want = cfg.K if cfg.use_acam else 1
    if backbone_cfg.in_channels != want:
        raise ConfigError(f"backbone in_channels must be {want} (use_acam={cfg.use_acam}), got {backbone_cfg.in_channels}")
    if train_data.num_classes != backbone_cfg.num_classes:
        raise ConfigError(f"dataset has {train_data.num_classes} classes, backbone {backbone_cfg.num_classes}")

    classifier = build_backbone(backbone_cfg, derive_seed(cfg.seed, "backbone"))
    predictor = init_predictor(cfg.K, generator(cfg.seed, "predictor")) if cfg.use_acam else None
    frozen = freeze_stage1(predictor) if cfg.freeze_stage1 else set()
    named = _named_params(classifier, predictor)
    state = AdamState()
    history = TrainHistory()
    order_seed = derive_seed(cfg.seed, "order")
    best_acc, best_epoch = -1.0, None
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        loss_sum, correct, seen = 0.0, 0, 0
        for step, (x, y) in enumerate(batch_iter(train_data, cfg.batch_size, True, order_seed, epoch)):
            logits = model_logits(classifier, predictor, x, rng_spec)
            loss = dc.softmax_cross_entropy(logits, y)
            if not np.isfinite(loss.data):
                raise NonFiniteLossError(
                    f"non-finite loss at epoch {epoch} step {step}; first non-finite tensor: {_first_nonfinite(loss)}"
                )
            for t in named.values():
                t.grad = None
            dc.backward(loss)
            grads = {n: t.grad for n, t in named.items() if n not in frozen and t.grad is not None}
            updated = adam_step({n: t.data for n, t in named.items()}, grads, state, cfg)
            for n, arr in updated.items():
                named[n].data = arr
            loss_sum += float(loss.data) * len(y)
            correct += int(np.sum(logits.data.argmax(axis=1) == y))
            seen += len(y)
        test_acc = _accuracy(classifier, predictor, test_data, rng_spec)
        rec = EpochRecord(epoch, loss_sum / seen, correct / seen, test_acc, time.perf_counter() - t0)
        history.records.append(rec)
        log.info("epoch %d loss %.4f train_acc %.4f test_acc %.4f (%.1fs)", epoch, rec.train_loss,
                 rec.train_acc, rec.test_acc, rec.seconds)
        if out_dir is not None and not np.isnan(test_acc) and test_acc > best_acc:
            best_acc, best_epoch = test_acc, epoch
            save_model(out_dir / "best.ckpt", classifier, predictor, rng_spec, cfg, {**(meta or {}), "epoch": epoch})

    if out_dir is not None:
        save_model(out_dir / "final.ckpt", classifier, predictor, rng_spec, cfg, {**(meta or {}), "epoch": cfg.epochs})
    return TrainResult(classifier, predictor, history, rng_spec, best_epoch)


# ---------------------------------------------------------------------------
# model checkpoints
# ---------------------------------------------------------------------------


def save_model(path, classifier: Classifier, predictor: PredictorWeights | None, rng_spec: RangeSpec,
               cfg: TrainConfig | None = None, extra: dict | None = None) -> None:
    tensors = {n: t.data for n, t in _named_params(classifier, predictor).items()}
    meta = {
        "backbone": classifier.config.to_dict(),
        "use_acam": predictor is not None,
        "K": predictor.k if predictor is not None else None,
        "range": {"alpha_min": rng_spec.alpha_min, "alpha_max": rng_spec.alpha_max},
        "train": asdict(cfg) if cfg is not None else None,
        **(extra or {}),
    }
    save_checkpoint(path, tensors, meta)


def load_model(path) -> tuple[Classifier, PredictorWeights | None, RangeSpec, dict]:
    tensors, meta = load_checkpoint(path)
    bcfg = BackboneConfig.from_dict(meta["backbone"])
    classifier = Classifier(
        bcfg,
        {n[len("backbone/"):]: Tensor(a, requires_grad=True, name=n[len("backbone/"):])
         for n, a in tensors.items() if n.startswith("backbone/")},
    )
    predictor = None
    if meta.get("use_acam"):
        predictor = PredictorWeights(
            {n[len("predictor/"):]: Tensor(a, requires_grad=True, name=n[len("predictor/"):])
             for n, a in tensors.items() if n.startswith("predictor/")}
        )
    r = meta.get("range") or {}
    return classifier, predictor, RangeSpec(r.get("alpha_min", 1.0), r.get("alpha_max", 3.0)), meta
