"""Model zoo: tower layouts, joint-probability heads, masked losses and training.

Every loss used here is a sum of clamped BCE terms whose prediction is a
product of tower probabilities, e.g. the CVRFR-within-V_j joint is
``q * r * s_j``. A variant is therefore fully described by its tower roles and
its list of ``LossTerm(label, factors)``; one generic loss/gradient routine
serves all of them.

Tower roles:

    q      p(y=1|x)
    r      p(z=1|y=1,x)
    e      p(y=1,z=0|x)               (ECVR-Base only)
    a{i}   p(w<W_i|y=1,x)
    s{j}   p(v<V_j|z=1,y=1,x)
    u{i}   p(w<W_i|z=1,y=1,x)
    t{i}_{j}  p(v<V_j,w<W_i|z=1,y=1,x)  (ECAD only; ECAD-Lite uses u{i}*s{j})
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .attribution import VARIANT_SPACES, LabeledBatch, WindowConfig, attribute_log, eligible_for_variant
from .errors import ConfigError, UnsupportedTaskError
from .nn import PROB_EPS, AdagradDecay, Network, bce, sigmoid

VARIANTS = (
    "CVR_BASE",
    "RFR_BASE",
    "ECVR_BASE",
    "IM",
    "IM_DEFER",
    "ESMM",
    "ECAD_DE",
    "ECAD_LITE",
    "ECAD",
    "ESMM_ORACLE",
)
TASKS = ("CVR", "RFR", "ECVR")

SUPPORTED_TASKS = {
    "CVR_BASE": ("CVR",),
    "RFR_BASE": ("RFR",),
    "ECVR_BASE": ("ECVR",),
}


def supported_tasks(variant: str) -> tuple[str, ...]:
    return SUPPORTED_TASKS.get(variant, TASKS)


@dataclass(frozen=True)
class LossTerm:
    label: str
    factors: tuple[str, ...]


@dataclass(frozen=True)
class NetSpec:
    name: str
    roles: tuple[str, ...]
    terms: tuple[LossTerm, ...]
    space: str


@dataclass(frozen=True)
class NetConfig:
    emb_dim: int = 8
    bottom_dims: tuple[int, ...] = (32, 16)
    tower_dims: tuple[int, ...] = (16,)
    alpha: float = 0.01
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "NetConfig":
        return cls(
            int(d["emb_dim"]),
            tuple(int(x) for x in d["bottom_dims"]),
            tuple(int(x) for x in d["tower_dims"]),
            float(d["alpha"]),
            int(d["seed"]),
        )


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    decay: float = 0.9999
    epsilon: float = 1e-8
    batch_size: int = 256
    epochs: int = 1
    term_weights: tuple[tuple[str, float], ...] = ()

    def optimizer(self) -> AdagradDecay:
        return AdagradDecay(self.learning_rate, self.decay, self.epsilon)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["term_weights"] = dict(self.term_weights)
        return d


# ---------------------------------------------------------------------------
# head combination


def combine_ecvr(q_y, r):
    return np.asarray(q_y) * (1.0 - np.asarray(r))


def combine_joint_heads(q_y, a_i):
    """p(w<W_i, y=1|x) from p(y=1|x) and p(w<W_i|y=1,x)."""
    return np.asarray(q_y) * np.asarray(a_i)


def combine_cvrfr(q_y, r):
    return np.asarray(q_y) * np.asarray(r)


def derive_rfr(p_cvrfr, p_cvr):
    """Conditional refund rate as the ratio of the two entire-space joints.

    Only for analysis: the ratio can exceed 1 when the joints come from
    separately trained heads, which is why training multiplies instead.
    """
    return np.asarray(p_cvrfr) / np.asarray(p_cvr)


def combine_lite_cross(u_i, s_j):
    return np.asarray(u_i) * np.asarray(s_j)


def joints(heads: Mapping[str, np.ndarray], wc: WindowConfig, lite: bool = False) -> dict[str, np.ndarray]:
    """Entire-space joint probabilities keyed by the label they are trained against."""
    q, r = heads["q"], heads["r"]
    cvrfr = combine_cvrfr(q, r)
    out = {"y": q, "y&z": cvrfr, "p_cvr": q, "p_rfr": r, "p_cvrfr": cvrfr, "p_ecvr": combine_ecvr(q, r)}
    for i in range(1, wc.n + 1):
        if f"a{i}" in heads:
            out[f"y{i}"] = combine_joint_heads(q, heads[f"a{i}"])
        if f"u{i}" in heads:
            out[f"y{i}&z"] = cvrfr * heads[f"u{i}"]
    for j in range(1, wc.m + 1):
        if f"s{j}" in heads:
            out[f"y&z{j}"] = cvrfr * heads[f"s{j}"]
    for i in range(1, wc.n + 1):
        for j in range(1, wc.m + 1):
            if lite and f"u{i}" in heads and f"s{j}" in heads:
                out[f"y{i}&z{j}"] = cvrfr * combine_lite_cross(heads[f"u{i}"], heads[f"s{j}"])
            elif f"t{i}_{j}" in heads:
                out[f"y{i}&z{j}"] = cvrfr * heads[f"t{i}_{j}"]
    return out


# ---------------------------------------------------------------------------
# loss terms per variant


def _defer_cvr_terms(n: int) -> list[LossTerm]:
    return [LossTerm(f"y{i}", ("q", f"a{i}")) for i in range(1, n + 1)] + [LossTerm("y", ("q",))]


def _defer_rfr_terms(m: int) -> list[LossTerm]:
    return [LossTerm(f"z{j}", ("r", f"s{j}")) for j in range(1, m + 1)] + [LossTerm("z", ("r",))]


def esmm_terms() -> list[LossTerm]:
    return [LossTerm("y", ("q",)), LossTerm("y&z", ("q", "r"))]


def ecad_de_terms(n: int, m: int) -> list[LossTerm]:
    return (
        _defer_cvr_terms(n)
        + [LossTerm(f"y&z{j}", ("q", "r", f"s{j}")) for j in range(1, m + 1)]
        + [LossTerm("y&z", ("q", "r"))]
    )


def ecad_terms(n: int, m: int, lite: bool = False) -> list[LossTerm]:
    cross = [
        LossTerm(f"y{i}&z{j}", ("q", "r", f"u{i}", f"s{j}") if lite else ("q", "r", f"t{i}_{j}"))
        for i in range(1, n + 1)
        for j in range(1, m + 1)
    ]
    de = ecad_de_terms(n, m)
    return de[:-1] + [LossTerm(f"y{i}&z", ("q", "r", f"u{i}")) for i in range(1, n + 1)] + cross + de[-1:]


def _roles(terms: Sequence[LossTerm]) -> tuple[str, ...]:
    seen: dict[str, None] = {}
    for t in terms:
        for f in t.factors:
            seen.setdefault(f, None)
    order = {"q": 0, "e": 0, "a": 1, "r": 2, "s": 3, "u": 4, "t": 5}
    return tuple(sorted(seen, key=lambda r: (order[r[0]], r)))


def net_specs(variant: str, wc: WindowConfig) -> list[NetSpec]:
    n, m = wc.n, wc.m
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")
    spaces = VARIANT_SPACES[variant]
    if variant == "CVR_BASE":
        groups = [("main", [LossTerm("y", ("q",))])]
    elif variant == "RFR_BASE":
        groups = [("main", [LossTerm("z", ("r",))])]
    elif variant == "ECVR_BASE":
        groups = [("main", [LossTerm("ecvr", ("e",))])]
    elif variant == "IM":
        groups = [("cvr", [LossTerm("y", ("q",))]), ("rfr", [LossTerm("z", ("r",))])]
    elif variant == "IM_DEFER":
        groups = [("cvr", _defer_cvr_terms(n)), ("rfr", _defer_rfr_terms(m))]
    elif variant in ("ESMM", "ESMM_ORACLE"):
        groups = [("main", esmm_terms())]
    elif variant == "ECAD_DE":
        groups = [("main", ecad_de_terms(n, m))]
    elif variant == "ECAD_LITE":
        groups = [("main", ecad_terms(n, m, lite=True))]
    else:
        groups = [("main", ecad_terms(n, m))]
    return [NetSpec(name, _roles(terms), tuple(terms), space) for (name, terms), space in zip(groups, spaces)]


def tower_count(variant: str, n: int, m: int) -> int:
    wc = WindowConfig.from_days(W=n + 2, V=m + 2, W_list=range(1, n + 1), V_list=range(1, m + 1))
    return sum(len(s.roles) for s in net_specs(variant, wc))


# ---------------------------------------------------------------------------
# masked loss


def masked_loss_terms(
    probs: Mapping[str, np.ndarray],
    labels: Mapping[str, np.ndarray],
    masks: Mapping[str, np.ndarray],
    terms: Sequence[LossTerm],
    weights: Mapping[str, float] | None = None,
) -> dict[str, float]:
    """Per-term summed BCE, counting only samples where the term's label is determined."""
    out = {}
    for t in terms:
        p = np.prod([np.asarray(probs[f], dtype=np.float64) for f in t.factors], axis=0)
        mask = np.asarray(masks[t.label], dtype=bool)
        y = np.where(mask, np.asarray(labels[t.label], dtype=np.float64), 0.0)
        w = 1.0 if weights is None else weights.get(t.label, 1.0)
        out[t.label] = w * float(np.sum(np.where(mask, bce(p, y), 0.0)))
    return out


def loss_and_grad(
    logits: np.ndarray,
    roles: Sequence[str],
    terms: Sequence[LossTerm],
    labels: Mapping[str, np.ndarray],
    masks: Mapping[str, np.ndarray],
    weights: Mapping[str, float] | None = None,
    eps: float = PROB_EPS,
) -> tuple[float, np.ndarray]:
    """Total masked loss and its gradient w.r.t. the tower logits (T, N).

    For a term with prediction p = prod_k sigmoid(z_k):
        dL/dz_k = -(1 - sigmoid(z_k))               if label = 1
                  p / (1 - p) * (1 - sigmoid(z_k))  if label = 0
    and zero wherever the clamp is active or the mask is off.
    """
    index = {r: k for k, r in enumerate(roles)}
    sig = sigmoid(logits)
    sig_neg = sigmoid(-logits)
    dlogits = np.zeros_like(logits)
    total = 0.0
    for t in terms:
        idx = [index[f] for f in t.factors]
        p = sig[idx[0]].copy()
        for k in idx[1:]:
            p *= sig[k]
        mask = masks[t.label]
        y = np.where(mask, labels[t.label], 0.0)
        w = 1.0 if weights is None else weights.get(t.label, 1.0)
        total += w * float(np.sum(np.where(mask, bce(p, y, eps), 0.0)))
        live = mask & (p > eps) & (p < 1.0 - eps)
        with np.errstate(divide="ignore", invalid="ignore"):
            coef = np.where(y > 0.5, -1.0, p / (1.0 - p))
        coef = np.where(live, w * coef, 0.0)
        for k in idx:
            dlogits[k] += coef * sig_neg[k]
    return total, dlogits


def _variant_loss(heads, labels, masks, terms) -> float:
    return float(sum(masked_loss_terms(heads, labels, masks, terms).values()))


def loss_defer(heads, labels, masks, n: int) -> float:
    return _variant_loss(heads, labels, masks, _defer_cvr_terms(n))


def loss_esmm(heads, labels, masks) -> float:
    return _variant_loss(heads, labels, masks, esmm_terms())


def loss_ecad_de(heads, labels, masks, n: int, m: int) -> float:
    return _variant_loss(heads, labels, masks, ecad_de_terms(n, m))


def loss_ecad(heads, labels, masks, n: int, m: int, lite: bool = False) -> float:
    return _variant_loss(heads, labels, masks, ecad_terms(n, m, lite))


# ---------------------------------------------------------------------------
# bundle, training, prediction


@dataclass
class ModelBundle:
    variant: str
    windows: WindowConfig
    net_config: NetConfig
    cardinalities: tuple[int, ...]
    specs: list[NetSpec]
    nets: list[Network]
    meta: dict = field(default_factory=dict)

    @property
    def params(self):
        return [p for net in self.nets for p in net.params]

    def net_with(self, role: str) -> Network:
        for net in self.nets:
            if role in net.roles:
                return net
        raise UnsupportedTaskError(f"{self.variant} has no {role!r} tower")

    @property
    def tower_total(self) -> int:
        return sum(len(s.roles) for s in self.specs)


def build(variant: str, wc: WindowConfig, cardinalities: Sequence[int], net_config: NetConfig = NetConfig()) -> ModelBundle:
    specs = net_specs(variant, wc)
    multi = len(specs) > 1
    nets = [
        Network(
            cardinalities,
            spec.roles,
            emb_dim=net_config.emb_dim,
            bottom_dims=net_config.bottom_dims,
            tower_dims=net_config.tower_dims,
            alpha=net_config.alpha,
            seed=net_config.seed,
            prefix=f"{spec.name}/" if multi else "",
        )
        for spec in specs
    ]
    return ModelBundle(variant, wc, net_config, tuple(int(c) for c in cardinalities), specs, nets)


def training_view(bundle: ModelBundle, batch: LabeledBatch, part: int) -> LabeledBatch:
    """The click-time-ordered samples the ``part``-th network trains on."""
    if bundle.variant == "ESMM_ORACLE" and not math.isinf(batch.cutoff):
        batch = attribute_log(batch.log, math.inf, batch.windows)
    sel = np.flatnonzero(eligible_for_variant(batch, bundle.variant, part))
    order = sel[np.argsort(batch.log.click_time[sel], kind="stable")]
    return batch.subset(order)


def train(
    bundle: ModelBundle,
    batch: LabeledBatch,
    config: TrainConfig = TrainConfig(),
    optimizer: AdagradDecay | None = None,
) -> ModelBundle:
    """One pass (per epoch) in click-time order: forward, masked loss, backward, optimizer step."""
    if batch.windows != bundle.windows:
        raise ConfigError("dataset was attributed with a different WindowConfig than the model")
    opt = optimizer or config.optimizer()
    weights = dict(config.term_weights) or None
    for part, (spec, net) in enumerate(zip(bundle.specs, bundle.nets)):
        view = training_view(bundle, batch, part)
        feats = view.log.features
        labels = {t.label: view.labels[t.label].astype(np.float64) for t in spec.terms}
        masks = {t.label: view.masks[t.label] for t in spec.terms}
        for _ in range(config.epochs):
            for start in range(0, len(view), config.batch_size):
                sl = slice(start, start + config.batch_size)
                logits = net.forward(feats[sl])
                _, dlogits = loss_and_grad(
                    logits,
                    net.roles,
                    spec.terms,
                    {k: v[sl] for k, v in labels.items()},
                    {k: v[sl] for k, v in masks.items()},
                    weights,
                )
                net.backward(dlogits)
                opt.step(net.params)
    return bundle


def predict(bundle: ModelBundle, features: np.ndarray, task: str, chunk: int = 65536) -> np.ndarray:
    if task not in supported_tasks(bundle.variant):
        raise UnsupportedTaskError(f"{bundle.variant} does not predict {task}")
    features = np.asarray(features)
    if features.ndim == 1:
        features = features[None, :]
    out = []
    for start in range(0, len(features), chunk):
        f = features[start : start + chunk]
        if task == "CVR":
            out.append(bundle.net_with("q").heads(f)["q"])
        elif task == "RFR":
            out.append(bundle.net_with("r").heads(f)["r"])
        elif bundle.variant == "ECVR_BASE":
            out.append(bundle.net_with("e").heads(f)["e"])
        else:
            q = bundle.net_with("q").heads(f)["q"]
            r = bundle.net_with("r").heads(f)["r"]
            out.append(combine_ecvr(q, r))
    return np.concatenate(out) if out else np.zeros(0)


def compose_im(cvr_base: ModelBundle, rfr_base: ModelBundle) -> ModelBundle:
    """IM from already-trained CVR-Base and RFR-Base bundles (no retraining)."""
    if cvr_base.variant != "CVR_BASE" or rfr_base.variant != "RFR_BASE":
        raise ConfigError("compose_im needs a CVR_BASE and an RFR_BASE bundle")
    im = build("IM", cvr_base.windows, cvr_base.cardinalities, cvr_base.net_config)
    for src, dst in zip((cvr_base, rfr_base), im.nets):
        for p_src, p_dst in zip(src.nets[0].params, dst.params):
            p_dst.values[...] = p_src.values
    return im
