"""Embed binary messages into trigger representations and extract them back.

The owner holds a trigger set (secret images, one random message each), a
frozen reference backbone f, and three trainable networks: the watermarked
backbone, an encoder that hides the message in a noisy trigger image, and a
decoder that reads it from the backbone's embedding. Training minimizes a
fidelity term (keep the watermarked backbone close to the reference on the
clean triggers) plus a message term (decoded soft bits close to the assigned
message under fresh Gaussian input noise). Verification replays the encoder
and decoder around any suspect backbone and counts bit errors.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nnengine import (
    Gradients,
    MlpNetwork,
    OptimizerState,
    backward,
    forward_batch,
    init_network,
    load_checkpoint,
    optimizer_step,
    save_checkpoint,
)

TRIGGER_MAGIC = b"RMTS"
TRIGGER_VERSION = 1

# Gradient of a vector norm at the origin is taken as 0 (subgradient choice).
_NORM_FLOOR = 1e-300


class VerificationRefused(RuntimeError):
    """Suspect model is architecturally incompatible with the verifier."""


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; the bundle was rolled back to the last good
    parameters before this was raised."""


@dataclass(eq=False)
class BitMessage:
    """A binary message: a vector of {0,1} entries."""

    bits: np.ndarray

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=np.int8)
        if self.bits.ndim != 1 or self.bits.size < 1:
            raise ValueError("message must be a non-empty 1-D bit vector")
        if not np.isin(self.bits, (0, 1)).all():
            raise ValueError("message entries must be 0 or 1")

    def __len__(self) -> int:
        return int(self.bits.size)

    def __eq__(self, other) -> bool:
        if not isinstance(other, BitMessage):
            return NotImplemented
        return np.array_equal(self.bits, other.bits)

    @classmethod
    def random(cls, n: int, rng: np.random.Generator) -> "BitMessage":
        return cls(rng.integers(0, 2, size=n, dtype=np.int8))

    def packed(self) -> bytes:
        """Bits packed LSB-first into ceil(n/8) bytes."""
        return np.packbits(self.bits.astype(np.uint8), bitorder="little").tobytes()

    @classmethod
    def from_packed(cls, data: bytes, n: int) -> "BitMessage":
        bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="little")
        return cls(bits[:n].astype(np.int8))


@dataclass
class TriggerSample:
    """One secret image with its assigned message and per-image noise scale."""

    image: np.ndarray
    message: BitMessage
    sigma: float

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        if self.image.ndim != 1:
            raise ValueError("trigger image must be a flat vector")
        if self.image.size and (self.image.min() < 0.0 or self.image.max() > 1.0):
            raise ValueError("trigger pixel intensities must lie in [0, 1]")
        self.sigma = float(self.sigma)
        if not self.sigma > 0.0:
            raise ValueError("sigma must be positive")


@dataclass
class TriggerSet:
    samples: list[TriggerSample]
    n: int
    s: int
    master_seed: int

    def __post_init__(self):
        if not self.samples:
            raise ValueError("trigger set must contain at least one sample")
        for t in self.samples:
            if len(t.message) != self.n:
                raise ValueError("all messages must have length n")
            if t.image.shape != (self.s,):
                raise ValueError("all images must have length s")
        self.master_seed = int(self.master_seed) & 0xFFFFFFFFFFFFFFFF

    def __len__(self) -> int:
        return len(self.samples)

    def images(self) -> np.ndarray:
        return np.stack([t.image for t in self.samples])

    def messages(self) -> np.ndarray:
        return np.stack([t.message.bits for t in self.samples]).astype(np.float64)

    def sigmas(self) -> np.ndarray:
        return np.array([t.sigma for t in self.samples])

    def trigger_seed(self, index: int) -> int:
        """Per-trigger extraction stream seed: master_seed XOR trigger index."""
        return (self.master_seed ^ index) & 0xFFFFFFFFFFFFFFFF


def save_trigger_set(triggers: TriggerSet, path) -> None:
    buf = bytearray()
    buf += TRIGGER_MAGIC
    buf += struct.pack("<H", TRIGGER_VERSION)
    buf += struct.pack("<III", len(triggers), triggers.s, triggers.n)
    buf += struct.pack("<Q", triggers.master_seed)
    for t in triggers.samples:
        buf += np.ascontiguousarray(t.image, dtype="<f8").tobytes()
        buf += struct.pack("<d", t.sigma)
        buf += t.message.packed()
    with open(path, "wb") as fh:
        fh.write(bytes(buf))


def load_trigger_set(path) -> TriggerSet:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != TRIGGER_MAGIC:
        raise ValueError("bad trigger-set magic bytes")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != TRIGGER_VERSION:
        raise ValueError(f"unsupported trigger-set version {version}")
    count, s, n = struct.unpack_from("<III", data, 6)
    (master_seed,) = struct.unpack_from("<Q", data, 18)
    offset = 26
    msg_bytes = (n + 7) // 8
    samples = []
    for _ in range(count):
        image = np.frombuffer(data, dtype="<f8", count=s, offset=offset).copy()
        offset += 8 * s
        (sigma,) = struct.unpack_from("<d", data, offset)
        offset += 8
        message = BitMessage.from_packed(data[offset : offset + msg_bytes], n)
        offset += msg_bytes
        samples.append(TriggerSample(image, message, sigma))
    if offset != len(data):
        raise ValueError("trailing bytes in trigger-set file")
    return TriggerSet(samples, n=n, s=s, master_seed=master_seed)


@dataclass
class HyperParams:
    """Training knobs for watermark embedding."""

    lam: float = 1.0  # weight of the message term
    k_train: int = 8  # noise draws per trigger per epoch
    epochs: int = 200
    learning_rate: float = 2e-3
    delta_scale: float = 0.5  # amplitude of the encoder's bounded perturbation
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.lam < 0.0:
            raise ValueError("lambda must be non-negative")
        if self.k_train < 1 or self.epochs < 0:
            raise ValueError("k_train >= 1 and epochs >= 0 required")
        if self.delta_scale <= 0.0:
            raise ValueError("delta_scale must be positive")


@dataclass
class ModelBundle:
    """Frozen reference backbone, watermarked backbone, encoder, decoder."""

    frozen_f: MlpNetwork  # s -> k, never updated
    watermarked_f: MlpNetwork  # s -> k
    encoder_e: MlpNetwork  # s + n -> s, bounded output
    decoder_d: MlpNetwork  # k -> n, sigmoid output
    hyper: HyperParams

    def __post_init__(self):
        s, k, n = self.s, self.k, self.n
        if self.watermarked_f.input_dim != s or self.watermarked_f.output_dim != k:
            raise ValueError("watermarked backbone does not match reference dims")
        if self.encoder_e.input_dim != s + n or self.encoder_e.output_dim != s:
            raise ValueError("encoder must map s+n -> s")
        if self.decoder_d.input_dim != k or self.decoder_d.output_dim != n:
            raise ValueError("decoder must map k -> n")
        if self.decoder_d.layers[-1].activation != "sigmoid":
            raise ValueError("decoder output layer must be sigmoid")

    @property
    def s(self) -> int:
        return self.frozen_f.input_dim

    @property
    def k(self) -> int:
        return self.frozen_f.output_dim

    @property
    def n(self) -> int:
        return self.decoder_d.output_dim

    @classmethod
    def create(
        cls,
        source_f: MlpNetwork,
        n: int,
        encoder_hidden: tuple[int, ...] = (256,),
        decoder_hidden: tuple[int, ...] = (128,),
        hyper: HyperParams | None = None,
        seed: int = 0,
    ) -> "ModelBundle":
        """Build a fresh bundle around an existing backbone. The watermarked
        backbone starts as an exact copy of the reference."""
        s, k = source_f.input_dim, source_f.output_dim
        rng = np.random.default_rng(seed)
        enc_dims = [s + n, *encoder_hidden, s]
        encoder = init_network(enc_dims, ["tanh"] * (len(enc_dims) - 1), rng)
        dec_dims = [k, *decoder_hidden, n]
        decoder = init_network(
            dec_dims, ["tanh"] * (len(dec_dims) - 2) + ["sigmoid"], rng
        )
        return cls(
            frozen_f=source_f.copy(),
            watermarked_f=source_f.copy(),
            encoder_e=encoder,
            decoder_d=decoder,
            hyper=hyper or HyperParams(),
        )

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        save_checkpoint(self.frozen_f, directory / "frozen_f.rmk")
        save_checkpoint(self.watermarked_f, directory / "watermarked_f.rmk")
        save_checkpoint(self.encoder_e, directory / "encoder_e.rmk")
        save_checkpoint(self.decoder_d, directory / "decoder_d.rmk")
        lines = [
            f"lambda={self.hyper.lam!r}",
            f"k_train={self.hyper.k_train}",
            f"epochs={self.hyper.epochs}",
            f"learning_rate={self.hyper.learning_rate!r}",
            f"delta_scale={self.hyper.delta_scale!r}",
            f"weight_decay={self.hyper.weight_decay!r}",
            f"s={self.s}",
            f"k={self.k}",
            f"n={self.n}",
        ]
        (directory / "manifest.txt").write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, directory) -> "ModelBundle":
        directory = Path(directory)
        kv = {}
        for line in (directory / "manifest.txt").read_text().splitlines():
            line = line.strip()
            if line and "=" in line:
                key, value = line.split("=", 1)
                kv[key.strip()] = value.strip()
        hyper = HyperParams(
            lam=float(kv["lambda"]),
            k_train=int(kv["k_train"]),
            epochs=int(kv["epochs"]),
            learning_rate=float(kv["learning_rate"]),
            delta_scale=float(kv["delta_scale"]),
            weight_decay=float(kv.get("weight_decay", "0.0")),
        )
        return cls(
            frozen_f=load_checkpoint(directory / "frozen_f.rmk"),
            watermarked_f=load_checkpoint(directory / "watermarked_f.rmk"),
            encoder_e=load_checkpoint(directory / "encoder_e.rmk"),
            decoder_d=load_checkpoint(directory / "decoder_d.rmk"),
            hyper=hyper,
        )


@dataclass
class ExtractionBatch:
    """Decoded messages for one trigger under K fresh noise draws."""

    soft_bits: np.ndarray  # (K, n) in (0, 1)
    hard_bits: np.ndarray  # (K, n) in {0, 1}
    distances: np.ndarray  # (K,) Hamming distances to the trigger message
    noise_seed: int
    message: BitMessage

    def __post_init__(self):
        self.soft_bits = np.asarray(self.soft_bits, dtype=np.float64)
        self.hard_bits = np.asarray(self.hard_bits, dtype=np.int8)
        self.distances = np.asarray(self.distances, dtype=np.int64)
        n = len(self.message)
        k = self.soft_bits.shape[0]
        if self.soft_bits.shape != (k, n) or self.hard_bits.shape != (k, n):
            raise ValueError("soft/hard bit arrays must be (K, n)")
        if self.distances.shape != (k,):
            raise ValueError("distances must be length K")
        expected = (self.hard_bits != self.message.bits[None, :]).sum(axis=1)
        if not np.array_equal(self.distances, expected):
            raise ValueError("distances do not match hard bits vs message")
        if ((self.distances < 0) | (self.distances > n)).any():
            raise ValueError("distances out of range")

    @property
    def k_draws(self) -> int:
        return int(self.soft_bits.shape[0])

    @property
    def n(self) -> int:
        return int(self.soft_bits.shape[1])

    @property
    def hard_messages(self) -> list[BitMessage]:
        return [BitMessage(row) for row in self.hard_bits]


def sample_noise(sample: TriggerSample, k_draws: int, stream_seed: int) -> np.ndarray:
    """K perturbed copies of the trigger image: x + eps with eps iid Gaussian
    of per-coordinate std sample.sigma. Deterministic for a fixed seed."""
    if k_draws < 1:
        raise ValueError("need at least one draw")
    rng = np.random.default_rng(stream_seed)
    eps = rng.standard_normal((k_draws, sample.image.shape[0]))
    return sample.image[None, :] + sample.sigma * eps


def encoder_perturbation(
    encoder: MlpNetwork, noisy_images: np.ndarray, message: BitMessage | np.ndarray
) -> np.ndarray:
    """Raw bounded output of the encoder network for image/message pairs.

    Accepts a single image vector or a (B, s) batch; the message is
    broadcast when a single one is given.
    """
    single = np.asarray(noisy_images).ndim == 1
    x = np.atleast_2d(np.asarray(noisy_images, dtype=np.float64))
    bits = message.bits if isinstance(message, BitMessage) else np.asarray(message)
    bits = np.atleast_2d(np.asarray(bits, dtype=np.float64))
    if bits.shape[0] == 1 and x.shape[0] > 1:
        bits = np.repeat(bits, x.shape[0], axis=0)
    out, _ = forward_batch(encoder, np.concatenate([x, bits], axis=1))
    return out[0] if single else out


def encode_trigger(
    encoder: MlpNetwork,
    perturbed_image: np.ndarray,
    message: BitMessage | np.ndarray,
    delta_scale: float = 0.5,
) -> np.ndarray:
    """Stego input for the backbone: the noisy image plus the encoder's
    bounded perturbation scaled by delta_scale."""
    raw = encoder_perturbation(encoder, perturbed_image, message)
    return np.asarray(perturbed_image, dtype=np.float64) + delta_scale * raw


def decode_message(decoder: MlpNetwork, embedding: np.ndarray) -> tuple[np.ndarray, BitMessage]:
    """Soft sigmoid outputs and the thresholded hard message.

    A soft bit of exactly 0.5 rounds up to 1.
    """
    emb = np.asarray(embedding, dtype=np.float64)
    if emb.ndim != 1 or emb.shape[0] != decoder.input_dim:
        raise ValueError(f"embedding must have length {decoder.input_dim}")
    soft, _ = forward_batch(decoder, emb[None, :])
    soft = soft[0]
    hard = BitMessage((soft >= 0.5).astype(np.int8))
    return soft, hard


@dataclass
class LossParts:
    total: float
    fidelity: float
    message: float


@dataclass
class TrainingLog:
    """Per-epoch records from embedding: fidelity/message/total are means
    per trigger, bit_accuracy is over all draws and bits."""

    epochs: list[dict] = field(default_factory=list)
    aborted: bool = False

    def final(self) -> dict:
        if not self.epochs:
            raise ValueError("empty training log")
        return self.epochs[-1]


def _loss_and_grads(
    frozen_f: MlpNetwork,
    watermarked_f: MlpNetwork,
    encoder_e: MlpNetwork,
    decoder_d: MlpNetwork,
    images: np.ndarray,  # (N, s)
    messages: np.ndarray,  # (N, n) float
    noise: np.ndarray,  # (N, K, s)
    lam: float,
    delta_scale: float,
    want_grads: bool = True,
):
    """Summed-over-triggers loss and, optionally, its analytic gradients.

    Returns (fidelity_sum, message_sum, bit_accuracy, grads) where grads is
    (g_watermarked, g_encoder, g_decoder) or None.
    """
    n_trig, k_draws, s = noise.shape
    n_bits = messages.shape[1]
    noisy = (images[:, None, :] + noise).reshape(n_trig * k_draws, s)
    bits_rep = np.repeat(messages, k_draws, axis=0)

    e_out, tr_e = forward_batch(encoder_e, np.concatenate([noisy, bits_rep], axis=1))
    stego = noisy + delta_scale * e_out
    emb, tr_fm = forward_batch(watermarked_f, stego)
    soft, tr_d = forward_batch(decoder_d, emb)

    diff_soft = soft - bits_rep
    message_sum = (lam / k_draws) * float((diff_soft**2).sum())
    hard = soft >= 0.5
    bit_accuracy = float((hard == (bits_rep >= 0.5)).mean())

    out_w, tr_fc = forward_batch(watermarked_f, images)
    out_ref, _ = forward_batch(frozen_f, images)
    diff_fid = out_w - out_ref
    norms = np.sqrt((diff_fid**2).sum(axis=1))
    fidelity_sum = float(norms.sum())

    if not want_grads:
        return fidelity_sum, message_sum, bit_accuracy, None

    g_soft = (2.0 * lam / k_draws) * diff_soft
    g_dec = backward(decoder_d, tr_d, g_soft)
    g_f_msg = backward(watermarked_f, tr_fm, g_dec.wrt_input)
    g_enc = backward(encoder_e, tr_e, delta_scale * g_f_msg.wrt_input)

    safe = np.maximum(norms, _NORM_FLOOR)
    g_fid_out = np.where(norms[:, None] > 0.0, diff_fid / safe[:, None], 0.0)
    g_f_fid = backward(watermarked_f, tr_fc, g_fid_out)
    g_f_msg.add_(g_f_fid)

    return fidelity_sum, message_sum, bit_accuracy, (g_f_msg, g_enc, g_dec)


def compute_loss(
    bundle: ModelBundle, sample: TriggerSample, k_draws: int, stream_seed: int
) -> LossParts:
    """Single-trigger loss: fidelity norm plus lambda/K-weighted squared
    distance between soft decoder outputs and the message."""
    noisy = sample_noise(sample, k_draws, stream_seed)
    noise = (noisy - sample.image[None, :])[None, :, :]
    fid, msg, _, _ = _loss_and_grads(
        bundle.frozen_f,
        bundle.watermarked_f,
        bundle.encoder_e,
        bundle.decoder_d,
        sample.image[None, :],
        sample.message.bits.astype(np.float64)[None, :],
        noise,
        bundle.hyper.lam,
        bundle.hyper.delta_scale,
        want_grads=False,
    )
    return LossParts(total=fid + msg, fidelity=fid, message=msg)


def compute_loss_gradients(
    bundle: ModelBundle, sample: TriggerSample, k_draws: int, stream_seed: int
) -> dict[str, Gradients]:
    """Analytic gradients of the single-trigger total loss for each
    trainable network (keys: watermarked_f, encoder_e, decoder_d)."""
    noisy = sample_noise(sample, k_draws, stream_seed)
    noise = (noisy - sample.image[None, :])[None, :, :]
    _, _, _, grads = _loss_and_grads(
        bundle.frozen_f,
        bundle.watermarked_f,
        bundle.encoder_e,
        bundle.decoder_d,
        sample.image[None, :],
        sample.message.bits.astype(np.float64)[None, :],
        noise,
        bundle.hyper.lam,
        bundle.hyper.delta_scale,
    )
    g_f, g_e, g_d = grads
    return {"watermarked_f": g_f, "encoder_e": g_e, "decoder_d": g_d}


def embed_watermark(bundle: ModelBundle, triggers: TriggerSet) -> tuple[ModelBundle, TrainingLog]:
    """Jointly train the watermarked backbone, encoder, and decoder on the
    trigger set. The frozen reference is never touched.

    Noise draws are fresh each epoch, derived deterministically from the
    trigger set's master seed. On a non-finite loss the bundle is rolled
    back to the last finite epoch and TrainingDiverged is raised.
    """
    if triggers.s != bundle.s or triggers.n != bundle.n:
        raise ValueError("trigger set dimensions do not match bundle")
    hyper = bundle.hyper
    images = triggers.images()
    messages = triggers.messages()
    sigmas = triggers.sigmas()
    n_trig = len(triggers)

    rng = np.random.default_rng(triggers.master_seed)
    states = {
        "f": OptimizerState.fresh(
            bundle.watermarked_f, lr=hyper.learning_rate, weight_decay=hyper.weight_decay
        ),
        "e": OptimizerState.fresh(bundle.encoder_e, lr=hyper.learning_rate),
        "d": OptimizerState.fresh(bundle.decoder_d, lr=hyper.learning_rate),
    }
    log = TrainingLog()
    snapshot = None
    for epoch in range(hyper.epochs):
        noise = rng.standard_normal((n_trig, hyper.k_train, triggers.s))
        noise *= sigmas[:, None, None]
        fid, msg, acc, grads = _loss_and_grads(
            bundle.frozen_f,
            bundle.watermarked_f,
            bundle.encoder_e,
            bundle.decoder_d,
            images,
            messages,
            noise,
            hyper.lam,
            hyper.delta_scale,
        )
        total = fid + msg
        g_f, g_e, g_d = grads
        if not (math.isfinite(total) and g_f.is_finite() and g_e.is_finite() and g_d.is_finite()):
            if snapshot is not None:
                bundle.watermarked_f.layers = snapshot[0].layers
                bundle.encoder_e.layers = snapshot[1].layers
                bundle.decoder_d.layers = snapshot[2].layers
            log.aborted = True
            raise TrainingDiverged(
                f"non-finite loss at epoch {epoch}; restored last good parameters"
            )
        snapshot = (
            bundle.watermarked_f.copy(),
            bundle.encoder_e.copy(),
            bundle.decoder_d.copy(),
        )
        optimizer_step(bundle.watermarked_f, g_f, states["f"])
        optimizer_step(bundle.encoder_e, g_e, states["e"])
        optimizer_step(bundle.decoder_d, g_d, states["d"])
        log.epochs.append(
            {
                "epoch": epoch,
                "fidelity": fid / n_trig,
                "message": msg / n_trig,
                "total": total / n_trig,
                "bit_accuracy": acc,
            }
        )
    return bundle, log


def extract_messages(
    suspect: MlpNetwork,
    encoder_e: MlpNetwork,
    decoder_d: MlpNetwork,
    sample: TriggerSample,
    k_draws: int,
    stream_seed: int,
    delta_scale: float = 0.5,
) -> ExtractionBatch:
    """Decode K messages from a suspect backbone for one trigger.

    The verifier's encoder and decoder wrap the suspect in place of the
    watermarked backbone; noise draws come from stream_seed. Refuses
    suspects whose input/output dimensions do not fit the verifier.
    """
    s = sample.image.shape[0]
    n = len(sample.message)
    if suspect.input_dim != s or suspect.output_dim != decoder_d.input_dim:
        raise VerificationRefused(
            f"suspect maps {suspect.input_dim} -> {suspect.output_dim}, verifier "
            f"needs {s} -> {decoder_d.input_dim}"
        )
    if encoder_e.input_dim != s + n or encoder_e.output_dim != s:
        raise ValueError("encoder does not match trigger dimensions")
    noisy = sample_noise(sample, k_draws, stream_seed)
    stego = noisy + delta_scale * encoder_perturbation(encoder_e, noisy, sample.message)
    emb, _ = forward_batch(suspect, stego)
    soft, _ = forward_batch(decoder_d, emb)
    hard = (soft >= 0.5).astype(np.int8)
    distances = (hard != sample.message.bits[None, :]).sum(axis=1)
    return ExtractionBatch(
        soft_bits=soft,
        hard_bits=hard,
        distances=distances,
        noise_seed=stream_seed,
        message=BitMessage(sample.message.bits.copy()),
    )
