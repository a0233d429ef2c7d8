"""Layers and the G / C_i / D_i model bundle."""

from __future__ import annotations

import io
import json
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .losses import PhiState, conditioning_map


def init_xavier(shape: Sequence[int], rng: np.random.Generator, dtype=np.float64) -> Tensor:
    """Glorot-uniform matrix: entries ~ U[-a, a], a = sqrt(6 / (fan_in + fan_out))."""
    if len(shape) != 2:
        raise ValueError(f"init_xavier expects a 2-D (fan_in, fan_out) shape, got {tuple(shape)}")
    fan_in, fan_out = shape
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


class Module:
    def parameters(self) -> List[Tensor]:
        return []

    def state(self) -> Dict[str, np.ndarray]:
        """Named arrays to persist (parameters and buffers)."""
        return {}

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        for key, value in state.items():
            target = getattr(self, key)
            if isinstance(target, Tensor):
                target.data = np.array(value)
            else:
                setattr(self, key, np.array(value))


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, dtype=np.float64):
        self.in_dim, self.out_dim = in_dim, out_dim
        self.weight = init_xavier((in_dim, out_dim), rng, dtype)
        self.bias = Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias

    def parameters(self) -> List[Tensor]:
        return [self.weight, self.bias]

    def state(self) -> Dict[str, np.ndarray]:
        return {"weight": self.weight.data, "bias": self.bias.data}


class _NormBase(Module):
    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1, dtype=np.float64):
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True, name="gamma")
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True, name="beta")
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def parameters(self) -> List[Tensor]:
        return [self.gamma, self.beta]

    def state(self) -> Dict[str, np.ndarray]:
        return {
            "gamma": self.gamma.data,
            "beta": self.beta.data,
            "running_mean": self.running_mean,
            "running_var": self.running_var,
        }

    def _check(self, h: Tensor, training: bool) -> None:
        if h.data.ndim != 2 or h.shape[1] != self.channels:
            raise ad.ShapeError(f"{type(self).__name__}: expected [batch x {self.channels}], got {h.shape}")
        if training and h.shape[0] < 2:
            raise ValueError(f"{type(self).__name__}: training needs batch size >= 2, got {h.shape[0]}")

    def _update_running(self, mu: np.ndarray, var: np.ndarray, n: int) -> None:
        m = self.momentum
        unbiased = var * n / (n - 1)
        self.running_mean = ((1 - m) * self.running_mean + m * mu).astype(self.running_mean.dtype)
        self.running_var = ((1 - m) * self.running_var + m * unbiased).astype(self.running_var.dtype)

    def infer(self, h: Tensor) -> Tensor:
        self._check(h, training=False)
        inv = 1.0 / np.sqrt(self.running_var + self.eps)
        hhat = (h - self.running_mean.astype(h.dtype)) * inv.astype(h.dtype)
        return hhat * self.gamma + self.beta


class MatchingNorm(_NormBase):
    """Per-domain batch statistics, shared target-trained affine parameters."""

    def __call__(self, h_source: Optional[Tensor], h_target: Optional[Tensor], training: bool = True):
        return mn_forward(h_source, h_target, self, training)


class BatchNorm(_NormBase):
    """Baseline: one set of statistics over the concatenated batch."""

    def __call__(self, h_source: Optional[Tensor], h_target: Optional[Tensor], training: bool = True):
        if h_target is None or h_source is None:
            only = h_source if h_source is not None else h_target
            z = bn_forward(only, self, training)
            return (z, None) if h_source is not None else (None, z)
        n_s = h_source.shape[0]
        z = bn_forward(ad.concat([h_source, h_target]), self, training)
        return z[slice(0, n_s)], z[slice(n_s, None)]


def mn_forward(h_source: Optional[Tensor], h_target: Optional[Tensor], layer: _NormBase, training: bool = True):
    """Matching normalization over a (source, target) pair of activations.

    In training each branch is standardized with its own batch statistics and
    both receive ``gamma_t * h + beta_t``.  Only the target branch routes
    gradient to the affine parameters; the source branch sees them as
    constants but still back-propagates through its own statistics.  Running
    statistics track the target branch.  In inference every input goes
    through the running target statistics.
    """
    if not training:
        return (
            layer.infer(h_source) if h_source is not None else None,
            layer.infer(h_target) if h_target is not None else None,
        )
    z_s = z_t = None
    if h_target is not None:
        layer._check(h_target, training=True)
        hhat_t, mu, var = ad.standardize(h_target, layer.eps)
        z_t = hhat_t * layer.gamma + layer.beta
        layer._update_running(mu, var, h_target.shape[0])
    if h_source is not None:
        layer._check(h_source, training=True)
        hhat_s, _, _ = ad.standardize(h_source, layer.eps)
        z_s = hhat_s * ad.stop_gradient(layer.gamma) + ad.stop_gradient(layer.beta)
    return z_s, z_t


def bn_forward(h: Tensor, layer: _NormBase, training: bool = True) -> Tensor:
    if not training:
        return layer.infer(h)
    layer._check(h, training=True)
    hhat, mu, var = ad.standardize(h, layer.eps)
    layer._update_running(mu, var, h.shape[0])
    return hhat * layer.gamma + layer.beta


def grl(x: Tensor, coeff: float = 1.0) -> Tensor:
    return ad.grl(x, coeff)


class FeatureExtractor(Module):
    """Dense stack: [Linear -> relu -> Norm] * len(hidden) -> Linear(feature_dim)."""

    def __init__(self, in_dim, hidden, feature_dim, norm_kind, rng, dtype=np.float64, eps=1e-5, momentum=0.1):
        norm_cls = {"MN": MatchingNorm, "BN": BatchNorm}[norm_kind]
        self.linears: List[Linear] = []
        self.norms: List[_NormBase] = []
        dims = [in_dim, *hidden]
        for a, b in zip(dims[:-1], dims[1:]):
            self.linears.append(Linear(a, b, rng, dtype))
            self.norms.append(norm_cls(b, eps=eps, momentum=momentum, dtype=dtype))
        self.head = Linear(dims[-1], feature_dim, rng, dtype)

    def parameters(self) -> List[Tensor]:
        out = []
        for lin, norm in zip(self.linears, self.norms):
            out += lin.parameters() + norm.parameters()
        return out + self.head.parameters()

    def __call__(self, x_source: Optional[Tensor], x_target: Optional[Tensor] = None, training: bool = True):
        hs, ht = x_source, x_target
        for lin, norm in zip(self.linears, self.norms):
            hs = ad.relu(lin(hs)) if hs is not None else None
            ht = ad.relu(lin(ht)) if ht is not None else None
            hs, ht = norm(hs, ht, training)
        return (
            self.head(hs) if hs is not None else None,
            self.head(ht) if ht is not None else None,
        )

    def features(self, x: Tensor) -> Tensor:
        """Inference-mode features for a single batch."""
        _, f = self(None, x, training=False)
        return f


class Discriminator(Module):
    """Three dense layers ending in a sigmoid domain probability."""

    def __init__(self, in_dim: int, hidden: int, rng, dtype=np.float64):
        self.l1 = Linear(in_dim, hidden, rng, dtype)
        self.l2 = Linear(hidden, hidden, rng, dtype)
        self.l3 = Linear(hidden, 1, rng, dtype)

    def parameters(self) -> List[Tensor]:
        return self.l1.parameters() + self.l2.parameters() + self.l3.parameters()

    def __call__(self, x: Tensor) -> Tensor:
        h = ad.relu(self.l1(x))
        h = ad.relu(self.l2(h))
        return ad.sigmoid(self.l3(h))


class ModelBundle:
    """Shared feature extractor, one classifier and discriminator per source."""

    def __init__(self, G: FeatureExtractor, classifiers, discriminators, phi: PhiState, source_names, arch: dict):
        if not (len(classifiers) == len(discriminators) == len(source_names)):
            raise ValueError("one classifier and one discriminator per source domain required")
        self.G = G
        self.classifiers: List[Linear] = list(classifiers)
        self.discriminators: List[Discriminator] = list(discriminators)
        self.phi = phi
        self.source_names = list(source_names)
        self.arch = dict(arch)

    @classmethod
    def build(
        cls,
        source_names: Sequence[str],
        in_dim: int,
        n_classes: int,
        rng_for,
        hidden: Sequence[int] = (64, 64),
        feature_dim: int = 16,
        disc_hidden: int = 32,
        norm_kind: str = "MN",
        d0: int = 4096,
        d_r: int = 1024,
        dtype=np.float64,
        mn_eps: float = 1e-5,
        mn_momentum: float = 0.1,
    ) -> "ModelBundle":
        """``rng_for(*keys)`` returns a generator keyed by name, not position."""
        G = FeatureExtractor(in_dim, list(hidden), feature_dim, norm_kind, rng_for("init", "G"), dtype, mn_eps, mn_momentum)
        phi = PhiState.create(feature_dim, n_classes, d0=d0, d_r=d_r, rng=rng_for("init", "phi"), dtype=dtype)
        classifiers = [Linear(feature_dim, n_classes, rng_for("init", "C", name), dtype) for name in source_names]
        discriminators = [Discriminator(phi.out_dim, disc_hidden, rng_for("init", "D", name), dtype) for name in source_names]
        arch = dict(
            in_dim=in_dim, n_classes=n_classes, hidden=list(hidden), feature_dim=feature_dim,
            disc_hidden=disc_hidden, norm_kind=norm_kind, d0=d0, d_r=d_r,
            dtype=np.dtype(dtype).name, mn_eps=mn_eps, mn_momentum=mn_momentum,
        )
        return cls(G, classifiers, discriminators, phi, source_names, arch)

    @property
    def n_classes(self) -> int:
        return self.arch["n_classes"]

    @property
    def dtype(self):
        return np.dtype(self.arch["dtype"])

    def parameters(self) -> List[Tensor]:
        out = self.G.parameters()
        for c in self.classifiers:
            out += c.parameters()
        for d in self.discriminators:
            out += d.parameters()
        return out

    def discriminate(self, features: Tensor, probs: Tensor, index: int, coeff: float = 1.0) -> Tensor:
        joint = conditioning_map(features, probs, self.phi)
        return self.discriminators[index](grl(joint, coeff))

    def features(self, X: np.ndarray) -> np.ndarray:
        return self.G.features(Tensor(np.asarray(X, dtype=self.dtype))).data

    def class_probs(self, X: np.ndarray) -> np.ndarray:
        """Average of the classifiers' softmax outputs, inference statistics."""
        f = self.G.features(Tensor(np.asarray(X, dtype=self.dtype)))
        probs = [ad.softmax(c(f)).data for c in self.classifiers]
        return np.mean(probs, axis=0)

    # -- checkpointing -------------------------------------------------------

    def _named_modules(self):
        for k, (lin, norm) in enumerate(zip(self.G.linears, self.G.norms)):
            yield f"G.lin{k}", lin
            yield f"G.norm{k}", norm
        yield "G.head", self.G.head
        for name, c in zip(self.source_names, self.classifiers):
            yield f"C.{name}", c
        for name, d in zip(self.source_names, self.discriminators):
            for part in ("l1", "l2", "l3"):
                yield f"D.{name}.{part}", getattr(d, part)

    def state_dict(self) -> Dict[str, np.ndarray]:
        out = {}
        for prefix, mod in self._named_modules():
            for key, arr in mod.state().items():
                out[f"{prefix}/{key}"] = np.array(arr)
        if self.phi.R_f is not None:
            out["phi/R_f"] = self.phi.R_f
            out["phi/R_p"] = self.phi.R_p
        return out

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        for prefix, mod in self._named_modules():
            mod.load_state({key: state[f"{prefix}/{key}"] for key in mod.state()})
        if "phi/R_f" in state:
            self.phi.R_f = np.array(state["phi/R_f"])
            self.phi.R_p = np.array(state["phi/R_p"])


def predict_average(bundle: ModelBundle, X: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Labels and confidences from the mean of the classifiers' probabilities.

    Ties resolve to the lowest class index.
    """
    X = np.asarray(X)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("predict_average: X must be a non-empty 2-D sample matrix")
    probs = bundle.class_probs(X)
    return probs.argmax(axis=1), probs.max(axis=1)


def save_checkpoint(bundle: ModelBundle, path, extra: Optional[dict] = None) -> None:
    """Write every tensor, running statistic and phi matrix to one ``.npz`` file."""
    arrays = bundle.state_dict()
    meta = {"arch": bundle.arch, "source_names": bundle.source_names, "phi_seed": bundle.phi.seed, "extra": extra or {}}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> Tuple[ModelBundle, dict]:
    with np.load(path) as npz:
        state = {k: npz[k] for k in npz.files}
    meta = json.loads(bytes(state.pop("__meta__")).decode())
    arch = meta["arch"]
    dummy = np.random.default_rng(0)
    bundle = ModelBundle.build(
        meta["source_names"], arch["in_dim"], arch["n_classes"], lambda *k: dummy,
        hidden=arch["hidden"], feature_dim=arch["feature_dim"], disc_hidden=arch["disc_hidden"],
        norm_kind=arch["norm_kind"], d0=arch["d0"], d_r=arch["d_r"], dtype=np.dtype(arch["dtype"]),
        mn_eps=arch["mn_eps"], mn_momentum=arch["mn_momentum"],
    )
    bundle.phi.seed = meta.get("phi_seed")
    bundle.load_state_dict(state)
    return bundle, meta.get("extra", {})


def recalibrate_norm_stats(G: FeatureExtractor, X: np.ndarray, dtype=None) -> None:
    """Set every norm layer's running statistics to the exact statistics of ``X``.

    Layers are processed in order, so each one sees activations produced
    with the already-updated statistics of the layers before it.
    """
    h = Tensor(np.asarray(X, dtype=dtype or G.head.weight.dtype))
    n = h.shape[0]
    for lin, norm in zip(G.linears, G.norms):
        h = ad.relu(lin(h))
        norm.running_mean = h.data.mean(axis=0).astype(norm.running_mean.dtype)
        norm.running_var = (h.data.var(axis=0) * n / max(n - 1, 1)).astype(norm.running_var.dtype)
        h = norm.infer(h)
