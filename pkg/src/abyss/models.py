"""Trainable super-resolution models over the autodiff engine.

Two model kinds share one uncertainty-aware training objective:

* ``ua_vqvae`` — encoder, vector quantizer with straight-through gradients,
  decoder with residual channel-attention blocks. The encoder downsamples
  twice (stride-2 convs on its first two stages), the decoder upsamples by
  nearest-neighbor + conv stages until it reaches scale * input size.
* ``ua_srcnn`` — nearest upsample to target size, then a plain residual
  CNN trunk.

Both end in a sigmoid so predictions live in [0, 1] like the normalized
depth tiles they are trained on.
"""

import json
import math
from dataclasses import dataclass

import numpy as np

from . import engine as E
from .engine import Tensor
from .errors import ConfigError, ShapeError
from .metrics import SSIM_C1, SSIM_C2, SSIM_SIGMA, SSIM_WINDOW

CHECKPOINT_MAGIC = b"ABYSSCKPT1\n"


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "ua_vqvae"
    hidden_dims: tuple = (16, 32)
    n_residual_blocks: int = 8
    codebook_size: int = 64
    embed_dim: int = 32
    scale: int = 2
    lambda_s: float = 10.0
    lambda_c: float = 0.1
    lambda_d: float = 0.1
    commitment_beta: float = 0.25
    srcnn_hidden: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("ua_vqvae", "ua_srcnn"):
            raise ConfigError(f"unknown model kind: {self.kind!r}")
        if self.codebook_size < 2 or self.embed_dim < 1:
            raise ConfigError("codebook needs K >= 2 and D >= 1")
        if min(self.lambda_s, self.lambda_c, self.lambda_d) < 0:
            raise ConfigError("loss weights must be non-negative")
        if not self.hidden_dims or any(h < 1 for h in self.hidden_dims):
            raise ConfigError("hidden_dims must be positive")
        if self.scale < 1:
            raise ConfigError("scale must be >= 1")
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "hidden_dims": list(self.hidden_dims),
            "n_residual_blocks": self.n_residual_blocks,
            "codebook_size": self.codebook_size,
            "embed_dim": self.embed_dim,
            "scale": self.scale,
            "lambda_s": self.lambda_s,
            "lambda_c": self.lambda_c,
            "lambda_d": self.lambda_d,
            "commitment_beta": self.commitment_beta,
            "srcnn_hidden": self.srcnn_hidden,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "hidden_dims" in d:
            d["hidden_dims"] = tuple(d["hidden_dims"])
        return cls(**d)


class _ParamFactory:
    """Seeded fan-in-scaled uniform initialization, in creation order."""

    def __init__(self, seed: int, dtype):
        self.rng = np.random.default_rng(seed)
        self.dtype = dtype
        self.params: dict = {}

    def conv(self, name: str, out_ch: int, in_ch: int, kh: int, kw: int):
        bound = 1.0 / math.sqrt(in_ch * kh * kw)
        w = self.rng.uniform(-bound, bound, size=(out_ch, in_ch, kh, kw))
        self.params[f"{name}.w"] = Tensor(w.astype(self.dtype), requires_grad=True)
        self.params[f"{name}.b"] = Tensor(np.zeros(out_ch, dtype=self.dtype), requires_grad=True)

    def dense(self, name: str, out_f: int, in_f: int):
        bound = 1.0 / math.sqrt(in_f)
        w = self.rng.uniform(-bound, bound, size=(in_f, out_f))
        self.params[f"{name}.w"] = Tensor(w.astype(self.dtype), requires_grad=True)
        self.params[f"{name}.b"] = Tensor(np.zeros(out_f, dtype=self.dtype), requires_grad=True)

    def codebook(self, name: str, K: int, D: int):
        # spread entries at roughly the scale of early encoder outputs so
        # nearest-entry assignments are informative from the first step
        bound = 1.0 / math.sqrt(D)
        c = self.rng.uniform(-bound, bound, size=(K, D))
        self.params[name] = Tensor(c.astype(self.dtype), requires_grad=True)


def _conv(params, name, x, stride=1, padding=1):
    return E.conv2d(x, params[f"{name}.w"], params[f"{name}.b"], stride=stride, padding=padding)


def _dense(params, name, x):
    return E.add(E.matmul(x, params[f"{name}.w"]), params[f"{name}.b"])


def _attention_gate(params, name, h):
    """Channel attention: GAP -> bottleneck MLP -> sigmoid scaling."""
    b, c = h.shape[0], h.shape[1]
    a = E.global_avg_pool(h)
    a = E.relu(_dense(params, f"{name}.fc1", a))
    a = E.sigmoid(_dense(params, f"{name}.fc2", a))
    return E.mul(h, E.reshape(a, (b, c, 1, 1)))


def _rcab(params, name, x):
    """Residual block with a channel-attention gate."""
    h = E.relu(_conv(params, f"{name}.c1", x))
    h = _conv(params, f"{name}.c2", h)
    h = _attention_gate(params, f"{name}.att", h)
    return E.add(x, h)


def _resblock(params, name, x):
    h = E.relu(_conv(params, f"{name}.c1", x))
    h = _conv(params, f"{name}.c2", h)
    return E.add(x, h)


def _make_rcab_params(fac: _ParamFactory, name: str, ch: int):
    fac.conv(f"{name}.c1", ch, ch, 3, 3)
    fac.conv(f"{name}.c2", ch, ch, 3, 3)
    mid = max(ch // 4, 4)
    fac.dense(f"{name}.att.fc1", mid, ch)
    fac.dense(f"{name}.att.fc2", ch, mid)


# ---------------------------------------------------------------------------
# vector quantizer
# ---------------------------------------------------------------------------


def quantize(codebook: Tensor, z: Tensor, beta: float = 0.25):
    """Nearest-codebook quantization with straight-through gradients.

    z: (B, D, h, w); codebook: (K, D). Ties in the nearest-entry search
    break toward the lowest index. Returns (z_q, indices, l_vq, l_div,
    usage_counts) where z_q carries identity gradients back to z, l_vq is
    the two-term commitment loss (elementwise mean, beta on the encoder
    term) and l_div = log K - H(usage). The l_div value comes from the hard
    assignment histogram; its gradient flows to the codebook through a
    softmax relaxation of the assignments (encoder output held fixed).
    """
    B, D, h, w = z.shape
    K = codebook.shape[0]
    if codebook.shape[1] != D:
        raise ShapeError(f"embed dim mismatch: z has {D}, codebook has {codebook.shape[1]}")
    flat = E.reshape(E.transpose(z, (0, 2, 3, 1)), (B * h * w, D))
    f = flat.data
    C = codebook.data
    d2 = (f * f).sum(axis=1, keepdims=True) + (C * C).sum(axis=1)[None, :] - 2.0 * (f @ C.T)
    indices = d2.argmin(axis=1)
    usage = np.bincount(indices, minlength=K)

    e_sel = E.gather_rows(codebook, indices)
    diff_embed = E.sub(Tensor(f), e_sel)                      # stop-grad on z
    diff_commit = E.sub(flat, Tensor(e_sel.data))             # stop-grad on codebook
    # squared L2 norm per position, averaged over positions
    l_vq = E.add(E.mean_(E.sum_(E.mul(diff_embed, diff_embed), axis=1)),
                 E.mul(E.mean_(E.sum_(E.mul(diff_commit, diff_commit), axis=1)), beta))

    # straight-through: forward value is e_sel, backward passes to z unchanged
    zq_flat = E.add(flat, Tensor(e_sel.data - f))
    z_q = E.transpose(E.reshape(zq_flat, (B, h, w, D)), (0, 3, 1, 2))

    # diversity: hard-count value, soft-count gradient via codebook entries;
    # logits are distance-scale normalized so shrinking the codebook cannot
    # fake uniform usage
    p_hard = usage / usage.sum()
    nz = p_hard[p_hard > 0]
    l_div_value = math.log(K) + float((nz * np.log(nz)).sum())
    c2 = E.reshape(E.sum_(E.mul(codebook, codebook), axis=1), (1, K))
    neg_d2 = E.sub(E.mul(E.matmul(Tensor(f), E.transpose(codebook, (1, 0))), 2.0), c2)
    scale = float(d2.mean()) + 1e-12
    p_soft = E.mean_(E.softmax(E.mul(neg_d2, 1.0 / scale), axis=1), axis=0)
    h_soft = E.mul(E.sum_(E.mul(p_soft, E.log(E.add(p_soft, 1e-12)))), -1.0)
    l_div_soft = E.sub(float(math.log(K)), h_soft)
    l_div = E.add(l_div_soft, float(l_div_value) - float(l_div_soft.data))

    return z_q, indices.reshape(B, h, w), l_vq, l_div, usage


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------


class UAVQVAE:
    """Vector-quantized autoencoder for LR -> HR depth tiles."""

    def __init__(self, config: ModelConfig, dtype=np.float32):
        if config.kind != "ua_vqvae":
            raise ConfigError(f"UAVQVAE requires kind 'ua_vqvae', got {config.kind!r}")
        self.config = config
        self.dtype = dtype
        hd = config.hidden_dims
        self.n_stride2 = min(2, len(hd))
        fac = _ParamFactory(config.seed, dtype)

        fac.conv("enc.stem", hd[0], 1, 3, 3)
        prev = hd[0]
        for i, ch in enumerate(hd):
            fac.conv(f"enc.s{i}.conv", ch, prev, 3, 3)
            _make_rcab_params(fac, f"enc.s{i}.rcab", ch)
            prev = ch
        fac.conv("enc.proj", config.embed_dim, prev, 3, 3)

        fac.codebook("codebook", config.codebook_size, config.embed_dim)

        self.dec_channels = self._decoder_channels()
        fac.conv("dec.stem", self.dec_channels[0], config.embed_dim, 3, 3)
        prev = self.dec_channels[0]
        for i, ch in enumerate(self.dec_channels):
            fac.conv(f"dec.s{i}.conv", ch, prev, 3, 3)
            _make_rcab_params(fac, f"dec.s{i}.rcab", ch)
            prev = ch
        fac.conv("dec.out", 1, prev, 3, 3)
        self.params = fac.params

    def _decoder_channels(self):
        n_up = self.n_stride2 + int(round(math.log2(self.config.scale)))
        if 2 ** int(round(math.log2(self.config.scale))) != self.config.scale:
            raise ConfigError(f"scale must be a power of two, got {self.config.scale}")
        rev = list(reversed(self.config.hidden_dims))
        chans = []
        for i in range(n_up):
            if i < len(rev):
                chans.append(rev[i])
            else:
                chans.append(max(3 * chans[-1] // 4, 8))
        return chans

    @property
    def codebook(self) -> Tensor:
        return self.params["codebook"]

    def encode(self, x: Tensor) -> Tensor:
        """LR tile batch (B,1,h,w) -> latent (B, D, h/4, w/4) for scale 2."""
        if x.data.ndim != 4 or x.data.shape[1] != 1:
            raise ShapeError(f"encoder expects (B,1,H,W), got {x.data.shape}")
        side = x.data.shape[2]
        if side % (2 ** self.n_stride2) or x.data.shape[3] % (2 ** self.n_stride2):
            raise ShapeError(f"input {x.data.shape} not divisible by {2 ** self.n_stride2}")
        h = _conv(self.params, "enc.stem", x)
        for i in range(len(self.config.hidden_dims)):
            stride = 2 if i < self.n_stride2 else 1
            h = E.relu(_conv(self.params, f"enc.s{i}.conv", h, stride=stride))
            h = _rcab(self.params, f"enc.s{i}.rcab", h)
        return _conv(self.params, "enc.proj", h)

    def decode(self, z_q: Tensor) -> Tensor:
        """Latent (B,D,lh,lw) -> HR prediction (B,1,lh*2^n, lw*2^n) in [0,1]."""
        h = _conv(self.params, "dec.stem", z_q)
        for i in range(len(self.dec_channels)):
            h = E.upsample_nearest(h, 2)
            h = E.relu(_conv(self.params, f"dec.s{i}.conv", h))
            h = _rcab(self.params, f"dec.s{i}.rcab", h)
        return E.sigmoid(_conv(self.params, "dec.out", h))

    def forward(self, x):
        """Full pass. Returns (pred, z, z_q, indices, l_vq, l_div, usage)."""
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        z = self.encode(x)
        z_q, indices, l_vq, l_div, usage = quantize(self.codebook, z, self.config.commitment_beta)
        pred = self.decode(z_q)
        return pred, z, z_q, indices, l_vq, l_div, usage

    def predict(self, lr_batch: np.ndarray) -> np.ndarray:
        with E.no_grad():
            pred = self.forward(np.asarray(lr_batch, dtype=self.dtype))[0]
        return pred.data


class UASRCNN:
    """Residual CNN over a nearest-upsampled input."""

    def __init__(self, config: ModelConfig, dtype=np.float32):
        if config.kind != "ua_srcnn":
            raise ConfigError(f"UASRCNN requires kind 'ua_srcnn', got {config.kind!r}")
        self.config = config
        self.dtype = dtype
        ch = config.srcnn_hidden
        fac = _ParamFactory(config.seed, dtype)
        fac.conv("srcnn.stem", ch, 1, 3, 3)
        for i in range(config.n_residual_blocks):
            fac.conv(f"srcnn.r{i}.c1", ch, ch, 3, 3)
            fac.conv(f"srcnn.r{i}.c2", ch, ch, 3, 3)
        fac.conv("srcnn.out", 1, ch, 3, 3)
        self.params = fac.params

    def forward(self, x):
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        if x.data.ndim != 4 or x.data.shape[1] != 1:
            raise ShapeError(f"srcnn expects (B,1,H,W), got {x.data.shape}")
        h = E.upsample_nearest(x, self.config.scale)
        h = E.relu(_conv(self.params, "srcnn.stem", h))
        for i in range(self.config.n_residual_blocks):
            h = _resblock(self.params, f"srcnn.r{i}", h)
        return E.sigmoid(_conv(self.params, "srcnn.out", h))

    def predict(self, lr_batch: np.ndarray) -> np.ndarray:
        with E.no_grad():
            pred = self.forward(np.asarray(lr_batch, dtype=self.dtype))
        return pred.data


def build_model(config: ModelConfig, dtype=np.float32):
    if config.kind == "ua_vqvae":
        return UAVQVAE(config, dtype=dtype)
    return UASRCNN(config, dtype=dtype)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _gaussian_1d(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    g = np.exp(-((np.arange(size) - half) ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def ssim_mean(pred: Tensor, target: Tensor) -> Tensor:
    """Differentiable SSIM averaged over valid windows and batch."""
    dtype = pred.data.dtype
    g = _gaussian_1d(SSIM_WINDOW, SSIM_SIGMA).astype(dtype)
    ky = Tensor(g.reshape(1, 1, SSIM_WINDOW, 1))
    kx = Tensor(g.reshape(1, 1, 1, SSIM_WINDOW))

    def blur(t):
        return E.conv2d(E.conv2d(t, ky), kx)

    mu_x = blur(pred)
    mu_y = blur(target)
    var_x = E.sub(blur(E.mul(pred, pred)), E.mul(mu_x, mu_x))
    var_y = E.sub(blur(E.mul(target, target)), E.mul(mu_y, mu_y))
    cov = E.sub(blur(E.mul(pred, target)), E.mul(mu_x, mu_y))
    num = E.mul(E.add(E.mul(E.mul(mu_x, mu_y), 2.0), SSIM_C1),
                E.add(E.mul(cov, 2.0), SSIM_C2))
    den = E.mul(E.add(E.add(E.mul(mu_x, mu_x), E.mul(mu_y, mu_y)), SSIM_C1),
                E.add(E.add(var_x, var_y), SSIM_C2))
    return E.mean_(E.div(num, den))


def expand_block_weights(u_weights: np.ndarray, block_size: int) -> np.ndarray:
    """(B, nby, nbx) block weights -> (B, 1, H, W) pixel map."""
    u = np.asarray(u_weights, dtype=np.float64)
    if u.ndim == 2:
        u = u[None]
    pixel = np.kron(u, np.ones((1, block_size, block_size)))
    return pixel[:, None, :, :]


def total_loss(pred: Tensor, target, u_weights: np.ndarray, l_vq, l_div,
               config: ModelConfig, block_size: int):
    """Composite objective: uncertainty-weighted MSE + SSIM + VQ terms.

    The reconstruction term is the pixel mean of U * (pred - target)^2 with
    U broadcast per block, which equals the area-weighted sum of per-block
    weighted MSEs. For ua_srcnn the vector-quantization terms are absent.
    Returns (loss, parts dict of floats).
    """
    if not isinstance(target, Tensor):
        target = Tensor(np.asarray(target, dtype=pred.data.dtype))
    B, _, H, W = pred.shape
    u_map = expand_block_weights(u_weights, block_size)
    if u_map.shape != (B, 1, H, W):
        raise ShapeError(f"weight grid {np.shape(u_weights)} does not tile ({B},1,{H},{W}) "
                         f"with block size {block_size}")
    diff = E.sub(pred, target)
    rec = E.mean_(E.mul(Tensor(u_map.astype(pred.data.dtype)), E.mul(diff, diff)))
    ssim_term = E.sub(1.0, ssim_mean(pred, target))
    loss = E.add(rec, E.mul(ssim_term, config.lambda_s))
    parts = {"rec": float(rec.data), "ssim": float(ssim_term.data)}
    if config.kind == "ua_vqvae":
        if l_vq is None or l_div is None:
            raise ConfigError("ua_vqvae loss requires l_vq and l_div")
        loss = E.add(loss, E.add(E.mul(l_vq, config.lambda_c), E.mul(l_div, config.lambda_d)))
        parts["vq"] = float(l_vq.data)
        parts["div"] = float(l_div.data)
    parts["total"] = float(loss.data)
    return loss, parts


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, model) -> None:
    """Self-describing binary: magic, JSON header, raw little-endian blobs."""
    names = sorted(model.params)
    tensors = []
    offset = 0
    blobs = []
    for name in names:
        arr = np.ascontiguousarray(model.params[name].data)
        blob = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        tensors.append({"name": name, "dtype": str(arr.dtype), "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"config": model.config.to_dict(), "tensors": tensors},
                        sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(len(header).to_bytes(8, "little"))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path):
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ConfigError(f"{path}: not a model checkpoint")
        hlen = int.from_bytes(f.read(8), "little")
        header = json.loads(f.read(hlen))
        payload = f.read()
    config = ModelConfig.from_dict(header["config"])
    entry_dtype = header["tensors"][0]["dtype"] if header["tensors"] else "float32"
    model = build_model(config, dtype=np.dtype(entry_dtype))
    for t in header["tensors"]:
        raw = payload[t["offset"]:t["offset"] + t["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(t["dtype"])).reshape(t["shape"]).copy()
        if t["name"] not in model.params:
            raise ConfigError(f"checkpoint tensor {t['name']!r} unknown to model {config.kind}")
        model.params[t["name"]].data = arr
    return model
