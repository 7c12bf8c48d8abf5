"""Vanilla VAE and rotation-invariant VAE.

Both share the same convolutional trunk and decoder.  The invariant model adds
a two-unit pose head whose output is projected onto the unit circle; its
decoder renders a canonical image from z and then re-poses it with the
differentiable rotation, so every bit of orientation has to leave the encoder
through the pose head.

Layout for input side S (divisible by 4), channels (C1, C2), hidden width H:

    encoder  x -> conv(C1, 3x3, /2) -> conv(C2, 3x3, /2) -> dense(H) -> heads
    decoder  z -> dense(H) -> dense(C2 * (S/4)^2) -> up x2 -> conv(C1) -> up x2 -> conv(1) -> sigmoid
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import nn
from .groupact import rotate_differentiable
from .nn import ParamSet, Tensor

KINDS = ("vanilla", "invariant")


@dataclass(frozen=True)
class VaeConfig:
    input_side: int = 28
    latent_dim: int = 10
    conv_channels: tuple[int, int] = (16, 32)
    hidden: int = 128
    kl_weight: float = 1.0

    def __post_init__(self):
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if self.kl_weight < 0:
            raise ValueError("kl_weight must be >= 0")
        if self.input_side < 4 or self.input_side % 4:
            raise ValueError(f"input_side must be a positive multiple of 4, got {self.input_side}")
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "VaeConfig":
        d = dict(d)
        d["conv_channels"] = tuple(d.get("conv_channels", (16, 32)))
        return cls(**d)


@dataclass
class EncoderOutput:
    mu: Tensor
    logvar: Tensor
    pose: Tensor | None = None


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    reconstruction: float
    kl: float
    consistency: float = 0.0


def init_params(cfg: VaeConfig, kind: str, seed: int, dtype=np.float32) -> ParamSet:
    """Glorot-uniform weights, zero biases.  Parameter order is fixed."""
    if kind not in KINDS:
        raise ValueError(f"unknown model kind {kind!r}")
    rng = np.random.default_rng(seed)
    c1, c2 = cfg.conv_channels
    q = cfg.input_side // 4
    d, h = cfg.latent_dim, cfg.hidden
    p: ParamSet = {}

    def conv(name, cout, cin):
        p[name + ".w"] = nn.glorot_uniform(rng, (3, 3, cin, cout), cin * 9, cout * 9, dtype)
        p[name + ".b"] = np.zeros(cout, dtype)

    def lin(name, fin, fout):
        p[name + ".w"] = nn.glorot_uniform(rng, (fin, fout), fin, fout, dtype)
        p[name + ".b"] = np.zeros(fout, dtype)

    conv("enc.conv1", c1, 1)
    conv("enc.conv2", c2, c1)
    lin("enc.fc", c2 * q * q, h)
    lin("enc.mu", h, d)
    lin("enc.logvar", h, d)
    if kind == "invariant":
        lin("enc.pose", h, 2)
    lin("dec.fc1", d, h)
    lin("dec.fc2", h, c2 * q * q)
    conv("dec.conv1", c1, c2)
    conv("dec.conv2", 1, c1)
    return p


class VAE:
    """Forward passes over a parameter mapping.

    ``P`` arguments may hold plain arrays (inference) or tape-watched tensors
    (training); when omitted, the model's own parameters are used.
    """

    def __init__(self, cfg: VaeConfig, kind: str, params: ParamSet):
        if kind not in KINDS:
            raise ValueError(f"unknown model kind {kind!r}")
        self.cfg = cfg
        self.kind = kind
        self.params = params

    @classmethod
    def create(cls, cfg: VaeConfig, kind: str, seed: int, dtype=np.float32) -> "VAE":
        return cls(cfg, kind, init_params(cfg, kind, seed, dtype))

    @property
    def invariant(self) -> bool:
        return self.kind == "invariant"

    def _check_input(self, x) -> np.ndarray:
        data = x.data if isinstance(x, Tensor) else np.asarray(x)
        s = self.cfg.input_side
        if data.ndim == 2:
            data = data[None]
        if data.ndim != 3 or data.shape[1:] != (s, s):
            raise nn.ShapeError(f"model expects ({s}, {s}) images, got {data.shape}")
        return data

    def _trunk(self, x, P):
        N = x.shape[0]
        s = self.cfg.input_side
        h = nn.reshape(x, (N, s, s, 1))
        h = nn.relu(nn.conv2d(h, P["enc.conv1.w"], P["enc.conv1.b"], stride=2, padding=1))
        h = nn.relu(nn.conv2d(h, P["enc.conv2.w"], P["enc.conv2.b"], stride=2, padding=1))
        return nn.relu(nn.dense(nn.flatten(h), P["enc.fc.w"], P["enc.fc.b"]))

    def encode(self, x, P=None, with_pose: bool = True) -> EncoderOutput:
        P = self.params if P is None else P
        x = self._check_input(x).astype(self.params["enc.fc.w"].dtype, copy=False)
        h = self._trunk(x, P)
        mu = nn.dense(h, P["enc.mu.w"], P["enc.mu.b"])
        logvar = nn.dense(h, P["enc.logvar.w"], P["enc.logvar.b"])
        pose = None
        if self.invariant and with_pose:
            pose = nn.unit_rows(nn.dense(h, P["enc.pose.w"], P["enc.pose.b"]))
        return EncoderOutput(mu, logvar, pose)

    def decode_canonical(self, z, P=None) -> Tensor:
        P = self.params if P is None else P
        z = nn.as_tensor(z)
        if z.data.ndim == 1:
            z = nn.reshape(z, (1, -1))
        if z.shape[1] != self.cfg.latent_dim:
            raise nn.ShapeError(f"latent code of length {z.shape[1]}, model has {self.cfg.latent_dim}")
        c1, c2 = self.cfg.conv_channels
        s = self.cfg.input_side
        q = s // 4
        N = z.shape[0]
        h = nn.relu(nn.dense(z, P["dec.fc1.w"], P["dec.fc1.b"]))
        h = nn.relu(nn.dense(h, P["dec.fc2.w"], P["dec.fc2.b"]))
        h = nn.upsample_nearest(nn.reshape(h, (N, q, q, c2)), 2)
        h = nn.relu(nn.conv2d(h, P["dec.conv1.w"], P["dec.conv1.b"], stride=1, padding=1))
        h = nn.upsample_nearest(h, 2)
        h = nn.conv2d(h, P["dec.conv2.w"], P["dec.conv2.b"], stride=1, padding=1)
        return nn.reshape(nn.sigmoid(h), (N, s, s))

    def decode_posed(self, z, pose, P=None) -> Tensor:
        return rotate_differentiable(self.decode_canonical(z, P), pose)

    def decode(self, z, pose=None, P=None) -> Tensor:
        """Reconstruction path used in training."""
        if self.invariant:
            return self.decode_posed(z, pose, P)
        return self.decode_canonical(z, P)

    def embed(self, x, batch_size: int = 512) -> np.ndarray:
        """Posterior means for a stack of images, computed in fixed-size batches.

        The pose head is not evaluated: the code is the same for both kinds.
        """
        x = self._check_input(x)
        out = [self.encode(x[i:i + batch_size], with_pose=False).mu.data for i in range(0, len(x), batch_size)]
        if not out:
            return np.zeros((0, self.cfg.latent_dim), dtype=self.params["enc.fc.w"].dtype)
        return np.concatenate(out, axis=0)


def encode_vanilla(model: VAE, x) -> tuple[np.ndarray, np.ndarray]:
    out = model.encode(x)
    return out.mu.data, out.logvar.data


def encode_invariant(model: VAE, x) -> EncoderOutput:
    if not model.invariant:
        raise ValueError("encode_invariant needs an invariant model")
    return model.encode(x)


def elbo_terms(x, recon, mu, logvar) -> tuple[Tensor, Tensor]:
    """Per-sample Bernoulli reconstruction NLL and KL, both shape (N,)."""
    return nn.bernoulli_nll(x, recon), nn.kl_diag_gaussian(mu, logvar)


def elbo_loss(x, recon, mu, logvar, kl_weight: float = 1.0) -> LossBreakdown:
    """Batch-mean ELBO pieces for already computed reconstructions."""
    rec, kl = elbo_terms(np.asarray(x, dtype=np.float64), np.asarray(recon, dtype=np.float64),
                         np.asarray(mu, dtype=np.float64), np.asarray(logvar, dtype=np.float64))
    r, k = float(rec.data.mean()), float(kl.data.mean())
    return LossBreakdown(r + kl_weight * k, r, k, 0.0)


def consistency_loss(out1: EncoderOutput, out2: EncoderOutput) -> Tensor:
    """Per-sample ||mu1 - mu2||^2 between encodings of two views of one image."""
    return nn.squared_distance(out1.mu, out2.mu)


def batch_loss(model: VAE, P, view1: np.ndarray, eps: np.ndarray, view2: np.ndarray | None = None,
               consistency_weight: float = 1.0) -> tuple[Tensor, LossBreakdown]:
    """Training objective for one batch, averaged over samples.

    The reconstruction target is ``view1`` itself.  For the invariant model
    ``view2`` is a second rotation of the same images; it is encoded in the
    same pass and only enters through the consistency penalty.
    """
    beta = model.cfg.kl_weight
    n = view1.shape[0]
    use_cons = model.invariant and view2 is not None and consistency_weight > 0
    batch = np.concatenate([view1, view2], axis=0) if use_cons else view1
    enc = model.encode(batch, P)
    if use_cons:
        e1 = EncoderOutput(nn.rows(enc.mu, 0, n), nn.rows(enc.logvar, 0, n), nn.rows(enc.pose, 0, n))
        e2 = EncoderOutput(nn.rows(enc.mu, n, 2 * n), nn.rows(enc.logvar, n, 2 * n))
    else:
        e1, e2 = enc, None
    z = nn.reparameterize(e1.mu, e1.logvar, eps)
    recon = model.decode(z, e1.pose, P)
    rec, kl = elbo_terms(view1, recon, e1.mu, e1.logvar)
    per_sample = nn.add(rec, nn.scale(kl, beta))
    cons_val = 0.0
    if use_cons:
        cons = consistency_loss(e1, e2)
        per_sample = nn.add(per_sample, nn.scale(cons, consistency_weight))
        cons_val = float(cons.data.astype(np.float64).mean())
    loss = nn.mean(per_sample)
    r = float(rec.data.astype(np.float64).mean())
    k = float(kl.data.astype(np.float64).mean())
    lb = LossBreakdown(r + beta * k + consistency_weight * cons_val, r, k, cons_val)
    return loss, lb
