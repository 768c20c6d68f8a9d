"""Shared autoencoder with pooling-gated attention, trained across patients.

One model serves every patient: each per-(site, band, state) feature
vector is an independent training sample in a single pooled dataset, and
the encoder's output is the latent node feature used by the graph
classifier downstream.

Architecture: five dense tanh layers down to the latent width and five
back up, with two multiplicative attention blocks on each side. A block
spans two dense layers; its gate is tanh(avgpool2(block input) @ W + b)
and multiplies the second layer's output elementwise. The decoder blocks
mirror this with unpooling (repeat by two) instead of average pooling,
so the gate input widens rather than narrows. Gates can be enabled on
the encoder side, the decoder side, both, or neither; with gates off the
model is exactly the plain 10-layer MLP autoencoder.

All parameters always exist regardless of placement, so checkpoints and
initialization streams are placement-independent; unused gates simply
never receive gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import nncore as nn
from .errors import ConfigError
from .util import require_finite

ATTENTION_PLACEMENTS = ("E", "D", "ED", "none")

_POOL = 2


@dataclass(frozen=True)
class SataeConfig:
    input_dim: int = 128
    latent_dim: int = 32
    encoder_dims: tuple[int, ...] = (128, 96, 64, 48, 32)
    decoder_dims: tuple[int, ...] | None = None
    attention_placement: str = "E"
    batch_size: int = 16
    epochs: int = 30
    lr: float = 0.002
    seed: int = 0

    def __post_init__(self):
        if self.attention_placement not in ATTENTION_PLACEMENTS:
            raise ConfigError(f"attention_placement must be one of "
                              f"{ATTENTION_PLACEMENTS}, got "
                              f"{self.attention_placement!r}")
        enc = tuple(int(d) for d in self.encoder_dims)
        if len(enc) != 5 or any(d < 1 for d in enc):
            raise ConfigError("encoder_dims must be 5 positive layer widths")
        if enc[0] != self.input_dim:
            raise ConfigError(f"encoder_dims[0] ({enc[0]}) must equal "
                              f"input_dim ({self.input_dim})")
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be positive")
        object.__setattr__(self, "encoder_dims", enc)
        if self.decoder_dims is None:
            # mirror: latent widens back through the encoder widths
            dec = (self.latent_dim, enc[4], enc[3], enc[2], enc[1])
            object.__setattr__(self, "decoder_dims", dec)
        else:
            dec = tuple(int(d) for d in self.decoder_dims)
            if len(dec) != 5 or any(d < 1 for d in dec):
                raise ConfigError("decoder_dims must be 5 positive layer widths")
            if dec[0] != self.latent_dim:
                raise ConfigError(f"decoder_dims[0] ({dec[0]}) must equal "
                                  f"latent_dim ({self.latent_dim})")
            object.__setattr__(self, "decoder_dims", dec)
        if "E" in self.attention_placement and self.attention_placement != "none":
            for which in (0, 2):
                if enc[which] % _POOL:
                    raise ConfigError(
                        f"encoder_dims[{which}]={enc[which]} must be even: "
                        f"the encoder attention gate pools its block input")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.epochs < 1:
            raise ConfigError("epochs must be positive")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")

    @property
    def gates_in_encoder(self) -> bool:
        return self.attention_placement in ("E", "ED")

    @property
    def gates_in_decoder(self) -> bool:
        return self.attention_placement in ("D", "ED")


class SataeModel:
    """Explicit forward/backward implementation over nncore primitives."""

    def __init__(self, cfg: SataeConfig, rng: np.random.Generator | None = None):
        self.cfg = cfg
        if rng is None:
            rng = np.random.default_rng(cfg.seed)
        enc, dec = cfg.encoder_dims, cfg.decoder_dims
        n = cfg.latent_dim
        self.params: dict[str, nn.Param] = {}

        def add(name, fan_in, fan_out):
            w, b = nn.dense_param(rng, fan_in, fan_out)
            self.params[f"{name}_w"] = w
            self.params[f"{name}_b"] = b

        # encoder: widths enc[0] -> enc[1] -> ... -> enc[4] -> latent
        fan = list(enc) + [n]
        for s in range(5):
            add(f"enc{s + 1}", fan[s], fan[s + 1])
        # encoder gates pool the block input (widths enc[0], enc[2])
        add("enc_gate1", enc[0] // _POOL, enc[2])
        add("enc_gate2", enc[2] // _POOL, enc[4])
        # decoder: widths dec[0] -> ... -> dec[4] -> input_dim
        fan = list(dec) + [cfg.input_dim]
        for s in range(5):
            add(f"dec{s + 1}", fan[s], fan[s + 1])
        # decoder gates unpool the block input (widths dec[0], dec[2])
        add("dec_gate1", dec[0] * _POOL, dec[2])
        add("dec_gate2", dec[2] * _POOL, dec[4])

    # -- helpers ----------------------------------------------------------

    def _p(self, name):
        return self.params[f"{name}_w"].data, self.params[f"{name}_b"].data

    def _dense_tanh(self, name, x, cache):
        w, b = self._p(name)
        y = nn.tanh_forward(nn.dense_forward(x, w, b))
        cache[name] = (x, y)
        return y

    def _dense_tanh_back(self, name, dy):
        x, y = self._cache[name]
        dz = nn.tanh_backward(y, dy)
        w = self.params[f"{name}_w"]
        dx, dw, db = nn.dense_backward(x, w.data, dz)
        w.grad += dw
        self.params[f"{name}_b"].grad += db
        return dx

    def _gate(self, name, pooled, cache):
        w, b = self._p(name)
        g = nn.tanh_forward(nn.dense_forward(pooled, w, b))
        cache[name] = (pooled, g)
        return g

    # -- encoder ----------------------------------------------------------

    def encode(self, x: np.ndarray, cache: dict | None = None) -> np.ndarray:
        """x: (batch, input_dim) -> (batch, latent_dim)."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.cfg.input_dim:
            raise ConfigError(f"encode expects (batch, {self.cfg.input_dim}), "
                              f"got {x.shape}")
        c = cache if cache is not None else {}
        gated = self.cfg.gates_in_encoder
        h1 = self._dense_tanh("enc1", x, c)
        h2 = self._dense_tanh("enc2", h1, c)
        if gated:
            g1 = self._gate("enc_gate1", nn.avgpool1d(x, _POOL, _POOL), c)
            a1 = nn.hadamard(g1, h2)
            c["enc_block1"] = (g1, h2)
        else:
            a1 = h2
        h3 = self._dense_tanh("enc3", a1, c)
        h4 = self._dense_tanh("enc4", h3, c)
        if gated:
            g2 = self._gate("enc_gate2", nn.avgpool1d(a1, _POOL, _POOL), c)
            a2 = nn.hadamard(g2, h4)
            c["enc_block2"] = (g2, h4)
        else:
            a2 = h4
        return self._dense_tanh("enc5", a2, c)

    def _encode_backward(self, dl: np.ndarray) -> np.ndarray:
        gated = self.cfg.gates_in_encoder
        da2 = self._dense_tanh_back("enc5", dl)
        if gated:
            g2, h4 = self._cache["enc_block2"]
            dg2, dh4 = nn.hadamard_backward(g2, h4, da2)
            pooled, g = self._cache["enc_gate2"]
            dz = nn.tanh_backward(g, dg2)
            wp = self.params["enc_gate2_w"]
            dpool, dw, db = nn.dense_backward(pooled, wp.data, dz)
            wp.grad += dw
            self.params["enc_gate2_b"].grad += db
            da1_from_gate = nn.avgpool1d_backward(dpool, _POOL)
        else:
            dh4 = da2
            da1_from_gate = 0.0
        dh3 = self._dense_tanh_back("enc4", dh4)
        da1 = self._dense_tanh_back("enc3", dh3) + da1_from_gate
        if gated:
            g1, h2 = self._cache["enc_block1"]
            dg1, dh2 = nn.hadamard_backward(g1, h2, da1)
            pooled, g = self._cache["enc_gate1"]
            dz = nn.tanh_backward(g, dg1)
            wp = self.params["enc_gate1_w"]
            dpool, dw, db = nn.dense_backward(pooled, wp.data, dz)
            wp.grad += dw
            self.params["enc_gate1_b"].grad += db
            dx_from_gate = nn.avgpool1d_backward(dpool, _POOL)
        else:
            dh2 = da1
            dx_from_gate = 0.0
        dh1 = self._dense_tanh_back("enc2", dh2)
        dx = self._dense_tanh_back("enc1", dh1) + dx_from_gate
        return dx

    # -- decoder ----------------------------------------------------------

    def decode(self, latent: np.ndarray, cache: dict | None = None) -> np.ndarray:
        latent = np.asarray(latent, dtype=np.float64)
        if latent.ndim != 2 or latent.shape[1] != self.cfg.latent_dim:
            raise ConfigError(f"decode expects (batch, {self.cfg.latent_dim}), "
                              f"got {latent.shape}")
        c = cache if cache is not None else {}
        gated = self.cfg.gates_in_decoder
        g1 = self._dense_tanh("dec1", latent, c)
        g2 = self._dense_tanh("dec2", g1, c)
        if gated:
            w1 = self._gate("dec_gate1", nn.unpool1d(latent, _POOL), c)
            b1 = nn.hadamard(w1, g2)
            c["dec_block1"] = (w1, g2)
        else:
            b1 = g2
        g3 = self._dense_tanh("dec3", b1, c)
        g4 = self._dense_tanh("dec4", g3, c)
        if gated:
            w2 = self._gate("dec_gate2", nn.unpool1d(b1, _POOL), c)
            b2 = nn.hadamard(w2, g4)
            c["dec_block2"] = (w2, g4)
        else:
            b2 = g4
        return self._dense_tanh("dec5", b2, c)

    def _decode_backward(self, dy: np.ndarray) -> np.ndarray:
        gated = self.cfg.gates_in_decoder
        db2 = self._dense_tanh_back("dec5", dy)
        if gated:
            w2, g4 = self._cache["dec_block2"]
            dw2, dg4 = nn.hadamard_backward(w2, g4, db2)
            pooled, g = self._cache["dec_gate2"]
            dz = nn.tanh_backward(g, dw2)
            wp = self.params["dec_gate2_w"]
            dunpool, dw, db = nn.dense_backward(pooled, wp.data, dz)
            wp.grad += dw
            self.params["dec_gate2_b"].grad += db
            db1_from_gate = nn.unpool1d_backward(dunpool, _POOL)
        else:
            dg4 = db2
            db1_from_gate = 0.0
        dg3 = self._dense_tanh_back("dec4", dg4)
        db1 = self._dense_tanh_back("dec3", dg3) + db1_from_gate
        if gated:
            w1, g2 = self._cache["dec_block1"]
            dw1, dg2 = nn.hadamard_backward(w1, g2, db1)
            pooled, g = self._cache["dec_gate1"]
            dz = nn.tanh_backward(g, dw1)
            wp = self.params["dec_gate1_w"]
            dunpool, dw, db = nn.dense_backward(pooled, wp.data, dz)
            wp.grad += dw
            self.params["dec_gate1_b"].grad += db
            dl_from_gate = nn.unpool1d_backward(dunpool, _POOL)
        else:
            dg2 = db1
            dl_from_gate = 0.0
        dg1 = self._dense_tanh_back("dec2", dg2)
        dl = self._dense_tanh_back("dec1", dg1) + dl_from_gate
        return dl

    # -- full pass ---------------------------------------------------------

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Reconstruction pass; caches intermediates for backward()."""
        self._cache = {}
        latent = self.encode(x, self._cache)
        return self.decode(latent, self._cache)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        """Accumulate parameter gradients for the cached forward pass;
        returns the gradient with respect to the input."""
        dl = self._decode_backward(dy)
        return self._encode_backward(dl)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def param_list(self) -> list[nn.Param]:
        return [self.params[k] for k in sorted(self.params)]


def train_shared(features_by_patient: dict[str, np.ndarray],
                 cfg: SataeConfig) -> tuple[SataeModel, list[float]]:
    """Train one model on the pooled cohort. Every (site, state, band)
    vector of every patient is one sample. Returns the model and the
    per-epoch mean reconstruction error."""
    rows = []
    for pid in sorted(features_by_patient):
        arr = np.asarray(features_by_patient[pid], dtype=np.float64)
        if arr.shape[-1] != cfg.input_dim:
            raise ConfigError(f"{pid}: feature length {arr.shape[-1]} != "
                              f"input_dim {cfg.input_dim}")
        rows.append(arr.reshape(-1, cfg.input_dim))
    if not rows:
        raise ConfigError("no training data")
    data = np.concatenate(rows, axis=0)
    if data.shape[0] == 0:
        raise ConfigError("no training data")

    model = SataeModel(cfg, np.random.default_rng(cfg.seed))
    optimizer = nn.Adam(model.param_list(), lr=cfg.lr)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5AE]))
    losses = []
    for _epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(data.shape[0])
        total = 0.0
        for start in range(0, data.shape[0], cfg.batch_size):
            batch = data[order[start:start + cfg.batch_size]]
            recon = model.forward(batch)
            loss, drecon = nn.mse(recon, batch)
            model.zero_grad()
            model.backward(drecon)
            optimizer.step()
            total += loss * batch.shape[0]
        epoch_loss = total / data.shape[0]
        require_finite("epoch training loss", np.array(epoch_loss))
        losses.append(epoch_loss)
    return model, losses


def encode_cohort(model: SataeModel,
                  features_by_patient: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Encode every feature tensor (sites, states, bands, I) into latents
    of shape (sites, states*bands, N); axis 1 is state-major, i.e. index
    = state_index * num_bands + band_index."""
    out = {}
    for pid in sorted(features_by_patient):
        arr = np.asarray(features_by_patient[pid], dtype=np.float64)
        if arr.ndim != 4 or arr.shape[-1] != model.cfg.input_dim:
            raise ConfigError(f"{pid}: expected (sites, states, bands, "
                              f"{model.cfg.input_dim}), got {arr.shape}")
        sites, states, bands, feat = arr.shape
        flat = arr.reshape(-1, feat)
        latent = model.encode(flat)
        out[pid] = latent.reshape(sites, states * bands, model.cfg.latent_dim)
    return out


# ---------------------------------------------------------------------------
# checkpointing

_ROLES = {"enc": "encoder", "dec": "decoder", "gate": "attention"}


def save_satae(model: SataeModel, path: str) -> None:
    tensors = []
    for name in sorted(model.params):
        role = "attention" if "gate" in name else _ROLES[name[:3]]
        tensors.append((name, model.params[name].data, role))
    meta = {"kind": "satae", "config": asdict(model.cfg)}
    nn.save_checkpoint(path, tensors, meta)


def load_satae(path: str) -> SataeModel:
    tensors, meta = nn.load_checkpoint(path)
    if meta.get("kind") != "satae":
        raise ConfigError(f"{path}: checkpoint kind {meta.get('kind')!r}, "
                          f"expected 'satae'")
    cfg_dict = dict(meta["config"])
    cfg_dict["encoder_dims"] = tuple(cfg_dict["encoder_dims"])
    if cfg_dict.get("decoder_dims") is not None:
        cfg_dict["decoder_dims"] = tuple(cfg_dict["decoder_dims"])
    cfg = SataeConfig(**cfg_dict)
    model = SataeModel(cfg)
    for name, param in model.params.items():
        if name not in tensors:
            raise ConfigError(f"{path}: missing tensor {name}")
        if tensors[name].shape != param.data.shape:
            raise ConfigError(f"{path}: tensor {name} has shape "
                              f"{tensors[name].shape}, expected {param.data.shape}")
        param.data[...] = tensors[name]
    return model
