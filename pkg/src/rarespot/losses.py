"""Multi-scale feature consistency losses with analytic gradients.

Three pixel-wise alignment terms compare channel vectors between pyramid
levels after the coarser levels are upsampled to the finest resolution:

* ``mse``: squared euclidean distance of raw activations
* ``kl``:  KL divergence between per-pixel channel softmaxes
* ``cos``: one minus cosine similarity

Each term is normalized by ``1 / (H * W)`` of the finest level. The
combined loss is ``alpha * mse + beta * kl + gamma * cos``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import FeatureMap, PyramidSet, log_softmax, upsample, upsample_adjoint, _as_array

COS_EPS = 1e-12
COS_ZERO_NORM = 1e-9

LEVELS = ("p3", "p4", "p5")
TERMS = ("mse", "kl", "cos")


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0

    def __post_init__(self):
        ws = (self.alpha, self.beta, self.gamma)
        if any(not np.isfinite(w) or w < 0 for w in ws):
            raise ValueError(f"loss weights must be finite and >= 0, got {ws}")
        if not any(w > 0 for w in ws):
            raise ValueError("at least one loss weight must be > 0")

    def as_dict(self):
        return {"mse": self.alpha, "kl": self.beta, "cos": self.gamma}


def _check_pairs(pairs):
    pairs = tuple(tuple(p) for p in pairs)
    if not pairs:
        raise ValueError("pair list must be nonempty")
    for a, b in pairs:
        if a not in LEVELS or b not in LEVELS:
            raise ValueError(f"unknown pyramid level in pair {(a, b)}; levels are {LEVELS}")
        if a == b:
            raise ValueError(f"pair {(a, b)} compares a level with itself")
    return pairs


@dataclass(frozen=True)
class PairingTopology:
    """Which level pairs each term compares. Pairs are ordered (first, second).

    The default is the literal pairing: mse and kl chain p3-p4 and p4-p5,
    cos anchors on p3 (p3-p4, p3-p5).
    """

    mse_pairs: tuple = (("p3", "p4"), ("p4", "p5"))
    kl_pairs: tuple = (("p3", "p4"), ("p4", "p5"))
    cos_pairs: tuple = (("p3", "p4"), ("p3", "p5"))

    def __post_init__(self):
        for name in ("mse_pairs", "kl_pairs", "cos_pairs"):
            object.__setattr__(self, name, _check_pairs(getattr(self, name)))

    @classmethod
    def preset(cls, name: str) -> "PairingTopology":
        chain = (("p3", "p4"), ("p4", "p5"))
        anchor = (("p3", "p4"), ("p3", "p5"))
        if name == "literal":
            return cls()
        if name == "chain":
            return cls(chain, chain, chain)
        if name == "anchor":
            return cls(anchor, anchor, anchor)
        raise ValueError(f"unknown topology preset {name!r}; expected literal, chain or anchor")

    def pairs(self, term: str):
        return getattr(self, f"{term}_pairs")


@dataclass
class LossReport:
    l_mse: float
    l_kl: float
    l_cos: float
    l_total: float
    weights: LossWeights
    # grads[term][level] at each level's own resolution; term "total" is the weighted sum
    grads: dict = field(default_factory=dict)

    def as_dict(self):
        return {"l_mse": self.l_mse, "l_kl": self.l_kl, "l_cos": self.l_cos, "l_total": self.l_total}


def _pair_arrays(a, b):
    x, y = _as_array(a), _as_array(b)
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {y.shape}")
    if x.ndim != 3:
        raise ValueError(f"expected C x H x W maps, got shape {x.shape}")
    return x, y


def loss_mse(a, b):
    """Mean over pixels of the squared channel-vector distance.

    Returns ``(value, grad_a, grad_b)``.
    """
    x, y = _pair_arrays(a, b)
    n = x.shape[1] * x.shape[2]
    d = x - y
    value = float(np.sum(d * d)) / n
    grad_a = 2.0 * d / n
    return value, grad_a, -grad_a


def loss_kl(a, b):
    """Mean over pixels of KL(softmax(a) || softmax(b)) across channels."""
    x, y = _pair_arrays(a, b)
    n = x.shape[1] * x.shape[2]
    la, lb = log_softmax(x), log_softmax(y)
    p, q = np.exp(la), np.exp(lb)
    diff = la - lb
    kl = np.sum(p * diff, axis=0, keepdims=True)
    value = float(np.sum(kl)) / n
    grad_a = p * (diff - kl) / n
    grad_b = (q - p) / n
    return value, grad_a, grad_b


def loss_cos(a, b):
    """Mean over pixels of ``1 - cos(a_ij, b_ij)``.

    Each norm gets ``COS_EPS`` added. Where both vectors have norm below
    ``COS_ZERO_NORM`` the gradient is zero.
    """
    x, y = _pair_arrays(a, b)
    n = x.shape[1] * x.shape[2]
    ra = np.sqrt(np.sum(x * x, axis=0, keepdims=True))
    rb = np.sqrt(np.sum(y * y, axis=0, keepdims=True))
    na, nb = ra + COS_EPS, rb + COS_EPS
    dot = np.sum(x * y, axis=0, keepdims=True)
    cos = dot / (na * nb)
    value = float(np.sum(1.0 - cos)) / n

    # d||a||/da = a/||a||, undefined at 0; that piece is dropped there
    unit_a = np.divide(x, ra, out=np.zeros_like(x), where=ra > 0)
    unit_b = np.divide(y, rb, out=np.zeros_like(y), where=rb > 0)
    grad_a = -(y / (na * nb) - cos * unit_a / na) / n
    grad_b = -(x / (na * nb) - cos * unit_b / nb) / n
    dead = (ra < COS_ZERO_NORM) & (rb < COS_ZERO_NORM)
    grad_a = np.where(dead, 0.0, grad_a)
    grad_b = np.where(dead, 0.0, grad_b)
    return value, grad_a, grad_b


LOSS_FUNCS = {"mse": loss_mse, "kl": loss_kl, "cos": loss_cos}


def consistency_loss(pyr: PyramidSet, weights: LossWeights | None = None,
                     topology: PairingTopology | None = None, upmode: str = "nearest",
                     kl_reverse: bool = False) -> LossReport:
    """Weighted multi-scale consistency loss over a feature pyramid.

    p4 and p5 are upsampled to p3's resolution, every term is evaluated over
    its configured pairs, and gradients are pulled back through the
    upsampling to each level's native resolution.

    ``kl_reverse`` swaps the argument order of every KL pair.
    """
    if not isinstance(pyr, PyramidSet):
        pyr = PyramidSet(*pyr)
    weights = weights or LossWeights()
    topology = topology or PairingTopology()
    _, h, w = pyr.p3.shape
    native = {"p3": pyr.p3, "p4": pyr.p4, "p5": pyr.p5}
    full = {
        "p3": pyr.p3.values,
        "p4": upsample(pyr.p4, h, w, upmode).values,
        "p5": upsample(pyr.p5, h, w, upmode).values,
    }

    values = {}
    grads = {}
    for term in TERMS:
        fn = LOSS_FUNCS[term]
        g_full = {lvl: np.zeros_like(full["p3"]) for lvl in LEVELS}
        total = 0.0
        for first, second in topology.pairs(term):
            if term == "kl" and kl_reverse:
                first, second = second, first
            v, ga, gb = fn(full[first], full[second])
            total += v
            g_full[first] += ga
            g_full[second] += gb
        values[term] = total
        grads[term] = {
            lvl: upsample_adjoint(g_full[lvl], native[lvl].height, native[lvl].width, upmode)
            for lvl in LEVELS
        }

    wd = weights.as_dict()
    l_total = wd["mse"] * values["mse"] + wd["kl"] * values["kl"] + wd["cos"] * values["cos"]
    grads["total"] = {
        lvl: wd["mse"] * grads["mse"][lvl] + wd["kl"] * grads["kl"][lvl] + wd["cos"] * grads["cos"][lvl]
        for lvl in LEVELS
    }
    return LossReport(values["mse"], values["kl"], values["cos"], l_total, weights, grads)


def _rel_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def finite_difference(f, arrays, step=1e-5):
    """Central finite-difference gradient of scalar ``f(*arrays)`` w.r.t. each array."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    out = []
    for k, arr in enumerate(arrays):
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + step
            fp = f(*arrays)
            arr[idx] = orig - step
            fm = f(*arrays)
            arr[idx] = orig
            g[idx] = (fp - fm) / (2 * step)
        out.append(g)
    return out


def gradcheck(op_id: str, dims=(3, 4, 4), seed: int = 0, step: float = 1e-5,
              weights: LossWeights | None = None, topology: PairingTopology | None = None,
              upmode: str = "nearest", tol: float = 1e-4) -> dict:
    """Compare analytic gradients against central differences on random inputs.

    For the pairwise ops ``dims`` is the shape of both inputs; for
    ``combined`` it is the shape of p3 (p4/p5 follow the pyramid ratios).
    Relative error per coordinate is ``|g - fd| / max(|g|, |fd|, 1e-8)``.
    """
    rng = np.random.default_rng(seed)
    c, h, w = dims
    if op_id in LOSS_FUNCS:
        fn = LOSS_FUNCS[op_id]
        inputs = [rng.standard_normal((c, h, w)) for _ in range(2)]
        _, ga, gb = fn(*inputs)
        analytic = [ga, gb]
        numeric = finite_difference(lambda a, b: fn(a, b)[0], inputs, step)
    elif op_id == "combined":
        weights = weights or LossWeights()
        inputs = [rng.standard_normal((c, h // s, w // s)) for s in (1, 2, 4)]

        def total(p3, p4, p5):
            return consistency_loss(PyramidSet(p3, p4, p5), weights, topology, upmode).l_total

        rep = consistency_loss(PyramidSet(*inputs), weights, topology, upmode)
        analytic = [rep.grads["total"][lvl] for lvl in LEVELS]
        numeric = finite_difference(total, inputs, step)
    else:
        raise ValueError(f"unknown op {op_id!r}; expected mse, kl, cos or combined")

    max_abs = max(float(np.max(np.abs(a - n))) for a, n in zip(analytic, numeric))
    max_rel = max(float(np.max(_rel_error(a, n))) for a, n in zip(analytic, numeric))
    return {
        "op": op_id,
        "dims": list(dims),
        "seed": seed,
        "step": step,
        "max_abs": max_abs,
        "max_rel": max_rel,
        "tol": tol,
        "passed": bool(max_rel < tol),
    }
