"""Training loop, checkpoints and the per-epoch JSON-lines log.

All randomness of a run is a pure function of ``(seed, epoch, stream)``:
shuffling order, the two rotation views and the reparameterization noise each
get their own numpy ``SeedSequence`` child.  A checkpoint therefore only has to
remember how many epochs are done, which makes resume-from-epoch-k bitwise
identical to an uninterrupted run.
"""

from __future__ import annotations

import json
import struct
import time
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .groupact import rotate_image
from .ingest import RawDataset
from .models import KINDS, VAE, VaeConfig, batch_loss, init_params

CKPT_MAGIC = b"IVCK"
CKPT_VERSION = 1

STREAM_SHUFFLE, STREAM_VIEW1, STREAM_VIEW2, STREAM_NOISE = range(4)


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    """Run settings.  Latent width 10 and 100 epochs are the reference
    protocol; batch size and optimizer settings are our own choices."""

    model: str = "invariant"
    vae: VaeConfig = field(default_factory=VaeConfig)
    epochs: int = 100
    batch_size: int = 128
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    consistency_weight: float = 1.0
    dataset: str = ""
    split: dict | None = None

    def __post_init__(self):
        if self.model not in KINDS:
            raise ValueError(f"unknown model kind {self.model!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if isinstance(self.vae, dict):
            self.vae = VaeConfig.from_dict(self.vae)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["vae"] = self.vae.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class Checkpoint:
    config: TrainConfig
    params: dict
    adam: nn.AdamState
    epoch: int = 0
    history: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)
    version: int = CKPT_VERSION

    @property
    def rng_state(self) -> dict:
        return {"seed": self.config.seed, "next_epoch": self.epoch}

    def model(self) -> VAE:
        return VAE(self.config.vae, self.config.model, self.params)


def _stream(seed: int, epoch: int, which: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(epoch, which))))


def epoch_poses(seed: int, epoch: int, which: int, n: int) -> np.ndarray:
    """Per-sample rotation for one epoch; row i belongs to sample index i."""
    th = _stream(seed, epoch, which).random(n) * (2 * np.pi)
    return np.stack([np.cos(th), np.sin(th)], axis=1)


def new_checkpoint(cfg: TrainConfig, X1: RawDataset) -> Checkpoint:
    params = init_params(cfg.vae, cfg.model, cfg.seed)
    adam = nn.AdamState.for_params(params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)
    prov = {"dataset": X1.name, **{k: v for k, v in X1.provenance.items() if k != "source"}}
    prov.setdefault("train_labels", sorted(set(X1.labels.tolist()), key=str))
    return Checkpoint(cfg, params, adam, 0, [], _jsonable(prov))


def _jsonable(obj):
    return json.loads(json.dumps(obj, default=lambda o: o.item() if hasattr(o, "item") else str(o)))


def _check_domain(X1: RawDataset, ck: Checkpoint) -> None:
    if len(X1) == 0:
        raise TrainingError("training set is empty")
    if X1.images.min() < 0 or X1.images.max() > 1:
        raise TrainingError("training pixels outside [0, 1]")
    if X1.side != ck.config.vae.input_side:
        raise TrainingError(f"images are {X1.side}px, model expects {ck.config.vae.input_side}px")
    if X1.provenance.get("side") == "X2":
        raise TrainingError("refusing to train on a test-domain (X2) dataset")
    allowed = ck.provenance.get("train_labels")
    if allowed is not None:
        seen = set(map(str, X1.labels.tolist()))
        extra = seen - set(map(str, allowed))
        if extra:
            raise TrainingError(f"training data holds labels outside the training domain: {sorted(extra)[:5]}")


def run_epoch(ck: Checkpoint, X1: RawDataset) -> dict:
    cfg = ck.config
    model = ck.model()
    e, n, bs = ck.epoch, len(X1), cfg.batch_size
    order = _stream(cfg.seed, e, STREAM_SHUFFLE).permutation(n)
    poses1 = epoch_poses(cfg.seed, e, STREAM_VIEW1, n).astype(np.float32)
    poses2 = epoch_poses(cfg.seed, e, STREAM_VIEW2, n).astype(np.float32) if model.invariant else None
    noise = _stream(cfg.seed, e, STREAM_NOISE)
    sums = np.zeros(4)
    params, adam = ck.params, ck.adam
    for b, start in enumerate(range(0, n, bs)):
        idx = order[start:start + bs]
        x = X1.images[idx]
        v1 = rotate_image(x, poses1[idx])
        v2 = rotate_image(x, poses2[idx]) if poses2 is not None else None
        eps = noise.standard_normal((len(idx), cfg.vae.latent_dim)).astype(np.float32)
        tape = nn.Tape()
        P = {k: tape.watch(v) for k, v in params.items()}
        model.params = params
        loss, lb = batch_loss(model, P, v1, eps, v2, cfg.consistency_weight)
        if not np.isfinite(lb.total):
            raise TrainingError(f"non-finite loss at epoch {e}, batch {b}: {lb}")
        tape.backward(loss)
        grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in P.items()}
        try:
            params, adam = nn.adam_step(params, grads, adam)
        except nn.NonFiniteGradientError as err:
            raise TrainingError(f"epoch {e}, batch {b}: {err}") from None
        sums += len(idx) * np.array([lb.reconstruction, lb.kl, lb.consistency, lb.total])
    ck.params, ck.adam = params, adam
    ck.epoch += 1
    r, k, c, t = (sums / n).tolist()
    rec = {"epoch": ck.epoch, "recon": r, "kl": k, "consistency": c, "total": t}
    ck.history.append(rec)
    return rec


def train(cfg: TrainConfig, X1: RawDataset, resume: Checkpoint | None = None, log_path=None,
          checkpoint_path=None, stop_after: int | None = None) -> Checkpoint:
    """Train (or continue training) until ``cfg.epochs`` epochs are done.

    When ``checkpoint_path`` is given the checkpoint is rewritten after every
    epoch, so an interrupted run can pick up where it stopped.  ``stop_after``
    ends the call early after that many completed epochs (used for
    interruption tests).
    """
    ck = resume if resume is not None else new_checkpoint(cfg, X1)
    if resume is not None and resume.config.to_dict() != cfg.to_dict():
        raise TrainingError("resume checkpoint was trained with a different configuration")
    _check_domain(X1, ck)
    last = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)
    log = open(log_path, "a") if log_path else None
    try:
        while ck.epoch < last:
            t0 = time.perf_counter()
            rec = run_epoch(ck, X1)
            if log:
                log.write(json.dumps({**rec, "wall_ms": round(1000 * (time.perf_counter() - t0), 1)}) + "\n")
                log.flush()
            if checkpoint_path:
                save_checkpoint(ck, checkpoint_path)
    finally:
        if log:
            log.close()
    return ck


# -- checkpoint file ------------------------------------------------------------------
#   0  4s   magic "IVCK"
#   4  u32  format version
#   8  u32  header length L
#   12 L    header, UTF-8 JSON (sorted keys): config, epoch, history, rng,
#           adam hyperparameters + step, provenance, tensor directory
#           [{name, dtype, shape, offset, nbytes}] with offsets relative to
#           the start of the blob
#   .. blob, raw little-endian tensor bytes in directory order
#   .. u32  CRC32 of every preceding byte

def checkpoint_to_bytes(ck: Checkpoint) -> bytes:
    tensors = [(f"param/{k}", v) for k, v in ck.params.items()]
    tensors += [(f"adam.m/{k}", v) for k, v in ck.adam.m.items()]
    tensors += [(f"adam.v/{k}", v) for k, v in ck.adam.v.items()]
    directory, chunks, off = [], [], 0
    for name, arr in tensors:
        a = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        b = a.tobytes()
        directory.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape), "offset": off, "nbytes": len(b)})
        chunks.append(b)
        off += len(b)
    header = {
        "config": ck.config.to_dict(),
        "epoch": ck.epoch,
        "history": ck.history,
        "rng": ck.rng_state,
        "adam": {"lr": ck.adam.lr, "beta1": ck.adam.beta1, "beta2": ck.adam.beta2, "eps": ck.adam.eps, "t": ck.adam.t},
        "provenance": ck.provenance,
        "tensors": directory,
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = CKPT_MAGIC + struct.pack("<II", ck.version, len(hb)) + hb + b"".join(chunks)
    return body + struct.pack("<I", zlib.crc32(body))


def checkpoint_from_bytes(raw: bytes) -> Checkpoint:
    if len(raw) < 16:
        raise CheckpointError("checkpoint truncated")
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {raw[:4]!r}")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint CRC mismatch (corrupt or truncated file)")
    version, hlen = struct.unpack_from("<II", body, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"checkpoint version {version} is not supported (expected {CKPT_VERSION})")
    header = json.loads(body[12:12 + hlen].decode())
    blob = memoryview(body)[12 + hlen:]
    arrays = {}
    for t in header["tensors"]:
        seg = blob[t["offset"]:t["offset"] + t["nbytes"]]
        if len(seg) != t["nbytes"]:
            raise CheckpointError(f"tensor {t['name']} runs past end of file")
        dt = np.dtype(t["dtype"])
        arrays[t["name"]] = np.frombuffer(seg, dtype=dt).reshape(t["shape"]).astype(dt.newbyteorder("="))
    cfg = TrainConfig.from_dict(header["config"])
    pick = lambda prefix: {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
    a = header["adam"]
    adam = nn.AdamState(a["lr"], a["beta1"], a["beta2"], a["eps"], a["t"], pick("adam.m/"), pick("adam.v/"))
    if header["rng"] != {"seed": cfg.seed, "next_epoch": header["epoch"]}:
        raise CheckpointError("checkpoint RNG state disagrees with its epoch counter")
    return Checkpoint(cfg, pick("param/"), adam, header["epoch"], header["history"], header["provenance"], version)


def save_checkpoint(ck: Checkpoint, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_to_bytes(ck))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())
