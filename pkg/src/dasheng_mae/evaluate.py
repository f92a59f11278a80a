"""Downstream evaluation of frozen embeddings: cosine k-NN, stratified folds and small probes."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .errors import ContractError, DomainError, FormatError
from .numerics import Rng, Tensor, cross_entropy, gelu, linear, no_grad, trunc_normal
from .optim import AdamW

log = logging.getLogger(__name__)

DEFAULT_K = 10
SIM_DECIMALS = 12
PROBE_HIDDEN = 512
PROBE_LR = 1e-3
PROBE_EPOCHS = 100
PROBE_BATCH = 64
PROBE_PATIENCE = 10


@dataclass
class LabeledEmbeddings:
    vectors: np.ndarray  # (M, D)
    labels: np.ndarray  # (M,) int class ids
    class_names: list

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.vectors.ndim != 2 or len(self.vectors) != len(self.labels):
            raise ContractError(f"vectors {self.vectors.shape} do not match {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise ContractError("label ids outside [0, num_classes)")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def subset(self, index) -> LabeledEmbeddings:
        return LabeledEmbeddings(self.vectors[index], self.labels[index], self.class_names)


@dataclass
class EvalReport:
    accuracy: float
    per_class: dict
    confusion: list  # confusion[true][pred]
    params: dict = field(default_factory=dict)
    fold: int | None = None
    n: int = 0
    zero_norm: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def make_report(true: np.ndarray, pred: np.ndarray, class_names: list, **extra) -> EvalReport:
    c = len(class_names)
    conf = np.zeros((c, c), dtype=np.int64)
    np.add.at(conf, (true, pred), 1)
    support = conf.sum(axis=1)
    per_class = {
        name: (float(conf[i, i] / support[i]) if support[i] else None) for i, name in enumerate(class_names)
    }
    acc = float(np.trace(conf) / len(true)) if len(true) else 0.0
    return EvalReport(acc, per_class, conf.tolist(), n=int(len(true)), **extra)


# ---------------------------------------------------------------------------
# k-NN
# ---------------------------------------------------------------------------


def _unit_rows(x: np.ndarray) -> tuple[np.ndarray, int]:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    zero = norms[:, 0] == 0
    # zero rows keep their raw (all-zero) values, i.e. the plain dot product
    return np.where(zero[:, None], x, x / np.where(zero[:, None], 1.0, norms)), int(zero.sum())


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, int]:
    ua, za = _unit_rows(a)
    ub, zb = _unit_rows(b)
    return ua @ ub.T, za + zb


def knn_predict(train_vectors, train_labels, test_vectors, k: int = DEFAULT_K, n_classes: int | None = None):
    """Predicted class per test row.

    Neighbours are ranked by descending cosine similarity, ties in similarity
    by training index. Similarities are rounded to ``SIM_DECIMALS`` places
    first so that mathematically equal cosines tie exactly. The majority class
    among the ``k`` nearest wins; a tie in votes goes to the tied class whose
    member ranks nearest.
    """
    train_labels = np.asarray(train_labels, dtype=np.int64)
    if not 1 <= k <= len(train_labels):
        raise DomainError(f"k={k} must lie in [1, {len(train_labels)}]")
    n_classes = int(train_labels.max()) + 1 if n_classes is None else n_classes
    sims, zero = cosine_similarity(test_vectors, train_vectors)
    sims = np.round(sims, SIM_DECIMALS)
    return kernels.knn_vote(np.ascontiguousarray(sims), train_labels, k, n_classes), zero


def knn_classify(train: LabeledEmbeddings, test: LabeledEmbeddings, k: int = DEFAULT_K, fold=None) -> EvalReport:
    if train.class_names != test.class_names:
        raise ContractError("train and test use different class lists")
    pred, zero = knn_predict(train.vectors, train.labels, test.vectors, k, train.n_classes)
    if zero:
        log.warning("%d zero-norm embeddings compared by plain dot product", zero)
    return make_report(test.labels, pred, test.class_names, params={"method": "knn", "k": k}, fold=fold, zero_norm=zero)


# ---------------------------------------------------------------------------
# folds
# ---------------------------------------------------------------------------


def kfold_split(m, folds: int, rng: Rng, labels=None) -> np.ndarray:
    """Fold id per item; stratified by ``labels`` when given. Fold sizes differ by at most one.

    ``m`` may be the item count or a label array (then it also supplies the labels).
    """
    if labels is None and not np.isscalar(m):
        labels = np.asarray(m)
    n = len(labels) if labels is not None else int(m)
    if folds < 2 or n < folds:
        raise DomainError(f"need folds >= 2 and at least as many items; got folds={folds}, M={n}")
    if labels is None:
        order = rng.permutation(n)
    else:
        labels = np.asarray(labels)
        parts = []
        for c, cls in enumerate(np.unique(labels)):
            members = np.flatnonzero(labels == cls)
            if len(members) < folds:
                log.warning("class %r has %d members for %d folds; not stratified", cls, len(members), folds)
            parts.append(members[rng.split(c).permutation(len(members))])
        order = np.concatenate(parts)
    assign = np.empty(n, dtype=np.int64)
    assign[order] = np.arange(n) % folds
    return assign


def cross_validate(data: LabeledEmbeddings, folds: int, seed: int = 0, evaluate=None) -> list:
    """Run ``evaluate(train, test, fold)`` (k-NN by default) on every fold."""
    evaluate = evaluate or (lambda tr, te, f: knn_classify(tr, te, fold=f))
    assign = kfold_split(len(data), folds, Rng(seed, (0xF01D,)), labels=data.labels)
    return [evaluate(data.subset(assign != f), data.subset(assign == f), f) for f in range(folds)]


def summarize_folds(reports: list) -> dict:
    accs = [r.accuracy for r in reports]
    return {"mean_accuracy": float(np.mean(accs)), "std_accuracy": float(np.std(accs)), "folds": [r.to_dict() for r in reports]}


# ---------------------------------------------------------------------------
# probes
# ---------------------------------------------------------------------------


@dataclass
class ProbeSpec:
    kind: str = "mlp"  # "linear" or "mlp"
    hidden: int = PROBE_HIDDEN
    lr: float = PROBE_LR
    epochs: int = PROBE_EPOCHS
    batch_size: int = PROBE_BATCH
    patience: int = PROBE_PATIENCE
    weight_decay: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("linear", "mlp"):
            raise ValueError(f"probe kind must be 'linear' or 'mlp', got {self.kind!r}")


class Probe:
    def __init__(self, dim: int, n_classes: int, spec: ProbeSpec):
        self.spec = spec
        rng = Rng(spec.seed, (0x9B0E,))
        dims = [dim, spec.hidden, n_classes] if spec.kind == "mlp" else [dim, n_classes]
        self.params = {}
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            w = trunc_normal(rng.split(i), (a, b), std=1.0 / np.sqrt(a), dtype=np.float64)
            self.params[f"layer{i}.weight"] = Tensor(w, requires_grad=True)
            self.params[f"layer{i}.bias"] = Tensor(np.zeros(b), requires_grad=True)
        self.n_layers = len(dims) - 1

    def logits(self, x: np.ndarray) -> Tensor:
        h = Tensor(np.asarray(x, dtype=np.float64))
        for i in range(self.n_layers):
            h = linear(h, self.params[f"layer{i}.weight"], self.params[f"layer{i}.bias"])
            if i < self.n_layers - 1:
                h = gelu(h)
        return h

    def predict(self, x: np.ndarray) -> np.ndarray:
        with no_grad():
            return self.logits(x).data.argmax(axis=1)

    def snapshot(self) -> dict:
        return {k: t.data.copy() for k, t in self.params.items()}

    def restore(self, snap: dict) -> None:
        for k, arr in snap.items():
            self.params[k].data[...] = arr


def probe_train(train: LabeledEmbeddings, val: LabeledEmbeddings, spec: ProbeSpec | None = None):
    """Fit a probe with softmax cross-entropy and AdamW; keep the epoch with the best validation accuracy.

    Training stops once validation accuracy has not improved for
    ``spec.patience`` epochs. Input embeddings are never modified.
    """
    spec = spec or ProbeSpec()
    if len(np.unique(train.labels)) < 2:
        raise DomainError("probe training needs at least two classes in the training set")
    if train.class_names != val.class_names:
        raise ContractError("train and validation use different class lists")
    probe = Probe(train.vectors.shape[1], train.n_classes, spec)
    opt = AdamW(weight_decay=spec.weight_decay)
    rng = Rng(spec.seed, (0x5B0F,))
    x, y = train.vectors, train.labels
    best_acc, best, since = -1.0, probe.snapshot(), 0
    epochs_run = 0
    for epoch in range(spec.epochs):
        order = rng.split(epoch).permutation(len(y))
        for lo in range(0, len(y), spec.batch_size):
            idx = order[lo : lo + spec.batch_size]
            loss = cross_entropy(probe.logits(x[idx]), y[idx])
            for t in probe.params.values():
                t.grad = None
            loss.backward()
            opt.step(probe.params, spec.lr)
        epochs_run = epoch + 1
        acc = float(np.mean(probe.predict(val.vectors) == val.labels))
        if acc > best_acc:
            best_acc, best, since = acc, probe.snapshot(), 0
        else:
            since += 1
            if since >= spec.patience:
                break
    probe.restore(best)
    params = asdict(spec)
    params.update(method="probe", epochs_run=epochs_run)
    return probe, make_report(val.labels, probe.predict(val.vectors), val.class_names, params=params)


# ---------------------------------------------------------------------------
# file inputs
# ---------------------------------------------------------------------------


def read_labels(path) -> dict:
    """``{id: label}`` from a JSON-lines file of ``{"id", "label"}`` objects."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
                out[str(obj["id"])] = str(obj["label"])
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise FormatError(f"{path}:{lineno}: bad label line ({exc})") from None
    return out


def labeled_from_records(records: list, labels: dict, class_names: list | None = None) -> LabeledEmbeddings:
    """Clip vectors (sequence records are mean-pooled) paired with their labels.

    Records without a label are skipped with a warning.
    """
    vecs, names = [], []
    for rec in records:
        if rec.id not in labels:
            log.warning("no label for %s; skipped", rec.id)
            continue
        vecs.append(rec.values.mean(axis=0, dtype=np.float64))
        names.append(labels[rec.id])
    if not vecs:
        raise DomainError("no labelled embeddings")
    class_names = class_names or sorted(set(names))
    index = {c: i for i, c in enumerate(class_names)}
    missing = set(names) - set(index)
    if missing:
        raise DomainError(f"labels not in class list: {sorted(missing)}")
    return LabeledEmbeddings(np.stack(vecs), np.array([index[n] for n in names]), list(class_names))
