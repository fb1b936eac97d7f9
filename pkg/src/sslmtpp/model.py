"""The semi-supervised marked point process network.

Two recurrent paths read the same event sequence:

* a supervised stack of LSTM cells over ``[scaled gap || marker embedding]``
  producing a per-step embedding ``f``;
* a plain-RNN encoder over the scaled gaps alone, paired with a decoder that
  reconstructs the gap sequence from the encoder's final states.

At each step the encoder's top-layer state ``e`` is added to ``f`` with weight
``lam`` and the sum feeds two small MLP heads that predict the next event's
marker distribution and scaled gap. The training objective is the plain sum
of marker cross-entropy, gap absolute error and gap reconstruction error.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Batch
from .layers import Dense, Embedding, RecurrentCell, RecurrentState, cell_step, dropout_apply, unroll_steps


class EmptyTargetError(ValueError):
    """A loss was requested on a batch that has no valid positions."""


class UnlabeledInputError(ValueError):
    """The supervised path received a real event without a marker."""


@dataclass
class ModelConfig:
    num_classes: int = 3
    hidden_dim: int = 64
    num_layers: int = 5
    marker_embed_dim: int = 16
    encoder_dim: int = 32
    encoder_layers: int = 2
    head_dim: int = 32
    dropout: float = 0.1
    lam: float = 0.1
    use_autoencoder: bool = True
    decoder_mode: str = "teacher"

    def validate(self) -> None:
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.decoder_mode not in ("teacher", "free"):
            raise ValueError("decoder_mode must be 'teacher' or 'free'")
        if self.num_classes < 2:
            raise ValueError("need at least 2 marker classes")
        if min(self.hidden_dim, self.num_layers, self.marker_embed_dim,
               self.encoder_dim, self.encoder_layers, self.head_dim) < 1:
            raise ValueError("all model sizes must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def encoder_dims(self) -> list[int]:
        # the top encoder layer must match the supervised width so the two embeddings can be summed
        return [self.encoder_dim] * (self.encoder_layers - 1) + [self.hidden_dim]

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in doc.items() if k in known})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Forward:
    """Per-step outputs of one forward pass over a batch."""

    logits: Tensor             # [B, T, M]
    gap_pred: Tensor           # [B, T]
    encoder_states: Tensor | None
    encoder_finals: list[RecurrentState] | None


def target_arrays(batch: Batch) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Next-event targets aligned to step ``j``: (marker ids, scaled gaps, validity mask).

    The last real event of every sequence has no target.
    """
    B, T = batch.mask.shape
    valid = np.zeros((B, T))
    valid[:, :-1] = batch.mask[:, 1:]
    next_markers = np.full((B, T), -1, dtype=np.int64)
    next_markers[:, :-1] = batch.markers[:, 1:]
    next_gaps = np.zeros((B, T))
    next_gaps[:, :-1] = batch.features[:, 1:]
    return next_markers, next_gaps, valid


def fuse(f: Tensor, e: Tensor, lam: float) -> Tensor:
    """``f + lam * e``; with ``lam == 0`` the supervised embedding passes through untouched."""
    if f.shape != e.shape:
        raise ad.ShapeError(f"fuse: embedding shapes differ: {f.shape} vs {e.shape}")
    if lam == 0:
        return f
    return ad.add(f, ad.mul(e, float(lam)))


class SSLMTPPNet:
    """Parameters and forward computations; see the module docstring."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        config.validate()
        self.config = config
        self.seed = seed
        # independent streams so that dropping the autoencoder leaves the supervised draws untouched
        sup_seed, ae_seed, drop_seed = np.random.SeedSequence(seed).spawn(3)
        sup_rng = np.random.default_rng(sup_seed)
        c = config
        self.embedding = Embedding(c.num_classes, c.marker_embed_dim, sup_rng, name="marker_embedding")
        dims = [1 + c.marker_embed_dim] + [c.hidden_dim] * c.num_layers
        self.lstm = [RecurrentCell("lstm", dims[k], dims[k + 1], sup_rng, name=f"lstm.{k}")
                     for k in range(c.num_layers)]
        self.marker_head = [Dense(c.hidden_dim, c.head_dim, "tanh", sup_rng, name="marker_head.0"),
                            Dense(c.head_dim, c.num_classes, None, sup_rng, name="marker_head.1")]
        self.time_head = [Dense(c.hidden_dim, c.head_dim, "tanh", sup_rng, name="time_head.0"),
                          Dense(c.head_dim, 1, None, sup_rng, name="time_head.1")]
        self.encoder: list[RecurrentCell] = []
        self.decoder: list[RecurrentCell] = []
        self.decoder_out: Dense | None = None
        if c.use_autoencoder:
            ae_rng = np.random.default_rng(ae_seed)
            edims = [1] + c.encoder_dims
            self.encoder = [RecurrentCell("plain", edims[k], edims[k + 1], ae_rng, name=f"encoder.{k}")
                            for k in range(c.encoder_layers)]
            self.decoder = [RecurrentCell("plain", edims[k], edims[k + 1], ae_rng, name=f"decoder.{k}")
                            for k in range(c.encoder_layers)]
            self.decoder_out = Dense(edims[-1], 1, None, ae_rng, name="decoder.out")
        self.dropout_rng = np.random.default_rng(drop_seed)

    # ------------------------------------------------------------------
    # parameter registry

    def supervised_parameters(self) -> dict[str, Tensor]:
        layers = [self.embedding, *self.lstm, *self.marker_head, *self.time_head]
        return {p.name: p for layer in layers for p in layer.parameters()}

    def autoencoder_parameters(self) -> dict[str, Tensor]:
        if not self.config.use_autoencoder:
            return {}
        layers = [*self.encoder, *self.decoder, self.decoder_out]
        return {p.name: p for layer in layers for p in layer.parameters()}

    def parameters(self) -> dict[str, Tensor]:
        return {**self.supervised_parameters(), **self.autoencoder_parameters()}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        if set(state) != set(params):
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            raise ValueError(f"state mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
        for name, value in state.items():
            value = np.asarray(value, dtype=np.float64)
            if value.shape != params[name].shape:
                raise ValueError(f"shape mismatch for {name}: checkpoint {value.shape}, model {params[name].shape}")
        for name, value in state.items():
            params[name].data = np.array(value, dtype=np.float64)

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    # ------------------------------------------------------------------
    # unsupervised path

    def encode_sequence(self, batch: Batch) -> tuple[Tensor, list[RecurrentState]]:
        """Encoder over gaps only: per-step top states ``[B, T, H]`` and each layer's state at the last real event."""
        if not self.config.use_autoencoder:
            raise RuntimeError("model was built without the encoder-decoder")
        x = batch.features
        steps = [Tensor(x[:, t: t + 1]) for t in range(x.shape[1])]
        layers, _ = unroll_steps(self.encoder, steps)
        last = np.zeros(batch.mask.shape)
        last[np.arange(batch.size), batch.lengths - 1] = 1.0
        finals = []
        for outs in layers:
            seq = ad.stack(outs, axis=1)
            pick = np.broadcast_to(last[:, :, None], seq.shape)
            finals.append(RecurrentState(ad.sum(ad.mul(seq, pick), axis=1)))
        return ad.stack(layers[-1], axis=1), finals

    def decode(self, batch: Batch, finals: list[RecurrentState]) -> Tensor:
        """Reconstructed scaled gaps ``[B, T]`` from the encoder's final states."""
        x = batch.features
        B, T = x.shape
        if self.config.decoder_mode == "teacher":
            prev = np.zeros((B, T))
            prev[:, 1:] = x[:, :-1]
            steps = [Tensor(prev[:, t: t + 1]) for t in range(T)]
            layers, _ = unroll_steps(self.decoder, steps, initial=finals)
            top = ad.stack(layers[-1], axis=1)
            return ad.reshape(self.decoder_out(top), (B, T))
        states = list(finals)
        inp: Tensor = Tensor(np.zeros((B, 1)))
        outs = []
        for _ in range(T):
            h = inp
            for k, cell in enumerate(self.decoder):
                h, states[k] = cell_step(cell, h, states[k])
            inp = self.decoder_out(h)
            outs.append(inp)
        return ad.reshape(ad.stack(outs, axis=1), (B, T))

    def _reconstruction_sum(self, batch: Batch, finals: list[RecurrentState]) -> tuple[Tensor, float]:
        count = float(batch.mask.sum())
        if count == 0:
            raise EmptyTargetError("reconstruction loss: batch has no real events")
        diff = ad.sub(self.decode(batch, finals), batch.features)
        return ad.sum(ad.mul(ad.mul(diff, diff), batch.mask)), count

    def reconstruction_loss(self, batch: Batch) -> Tensor:
        """Masked mean squared error between decoded and input scaled gaps; markers unused."""
        _, finals = self.encode_sequence(batch)
        total, count = self._reconstruction_sum(batch, finals)
        return ad.mul(total, 1.0 / count)

    # ------------------------------------------------------------------
    # supervised path

    def supervised_embedding(self, batch: Batch, training: bool = False) -> Tensor:
        """Stacked LSTM over ``[scaled gap || marker embedding]``; dropout on the top output when training."""
        if np.any((batch.markers < 0) & (batch.mask > 0)):
            raise UnlabeledInputError("supervised path needs a marker at every real event")
        markers = np.where(batch.mask > 0, batch.markers, 0)
        emb = self.embedding(markers)  # [B, T, E]
        T = batch.max_len
        steps = []
        for t in range(T):
            gap = Tensor(batch.features[:, t: t + 1])
            steps.append(ad.concat([gap, ad.slice(emb, (np.s_[:], t))], axis=1))
        layers, _ = unroll_steps(self.lstm, steps)
        f = ad.stack(layers[-1], axis=1)
        return dropout_apply(f, self.config.dropout, training, self.dropout_rng)

    def heads(self, fused: Tensor) -> tuple[Tensor, Tensor]:
        logits = self.marker_head[1](self.marker_head[0](fused))
        gap = self.time_head[1](self.time_head[0](fused))
        return logits, ad.reshape(gap, gap.shape[:-1])

    def forward(self, batch: Batch, training: bool = False, use_fusion: bool = True) -> Forward:
        f = self.supervised_embedding(batch, training)
        enc_states = finals = None
        if self.config.use_autoencoder and use_fusion and self.config.lam > 0:
            enc_states, finals = self.encode_sequence(batch)
            f = fuse(f, enc_states, self.config.lam)
        logits, gap = self.heads(f)
        return Forward(logits, gap, enc_states, finals)

    def predict_step(self, fused: Tensor) -> tuple[np.ndarray, np.ndarray]:
        """Marker probabilities and predicted next scaled gap from fused embeddings."""
        logits, gap = self.heads(fused)
        return ad.softmax(logits).data, gap.data

    @staticmethod
    def supervised_terms(out: Forward, batch: Batch) -> tuple[Tensor, Tensor]:
        next_markers, next_gaps, valid = target_arrays(batch)
        count = float(valid.sum())
        if count == 0:
            raise EmptyTargetError("supervised losses: no (event, next event) pairs in batch")
        onehot = np.zeros(out.logits.shape)
        b, t = np.nonzero(valid)
        onehot[b, t, next_markers[b, t]] = 1.0
        logp = ad.log_softmax(out.logits)
        ce = ad.neg(ad.sum(ad.mul(logp, onehot)))
        l_marker = ad.mul(ce, 1.0 / count)
        err = ad.abs(ad.sub(out.gap_pred, next_gaps))
        l_time = ad.mul(ad.sum(ad.mul(err, valid)), 1.0 / count)
        return l_marker, l_time

    def supervised_losses(self, batch: Batch, training: bool = False) -> tuple[Tensor, Tensor]:
        return self.supervised_terms(self.forward(batch, training), batch)

    def composite_loss(self, labeled: Batch, unlabeled: Batch | None = None,
                       training: bool = False, include_reconstruction: bool = True) -> dict[str, Tensor]:
        """Terms ``marker``, ``time``, ``recon`` and their plain sum ``total``.

        Reconstruction is averaged over the real events of both batches.
        """
        out = self.forward(labeled, training)
        l_marker, l_time = self.supervised_terms(out, labeled)
        terms = {"marker": l_marker, "time": l_time}
        if include_reconstruction and self.config.use_autoencoder:
            finals = out.encoder_finals
            if finals is None:
                _, finals = self.encode_sequence(labeled)
            total, count = self._reconstruction_sum(labeled, finals)
            if unlabeled is not None and unlabeled.size:
                _, finals_u = self.encode_sequence(unlabeled)
                total_u, count_u = self._reconstruction_sum(unlabeled, finals_u)
                total, count = ad.add(total, total_u), count + count_u
            terms["recon"] = ad.mul(total, 1.0 / count)
        loss = ad.add(l_marker, l_time)
        if "recon" in terms:
            loss = ad.add(loss, terms["recon"])
        terms["total"] = loss
        return terms

    # ------------------------------------------------------------------
    # inference

    def predict_proba_batch(self, batch: Batch) -> tuple[np.ndarray, np.ndarray]:
        """Marker probabilities ``[B, T, M]`` and scaled next-gap predictions ``[B, T]`` (no dropout, no graph)."""
        with ad.no_grad():
            out = self.forward(batch, training=False)
            return ad.softmax(out.logits).data, out.gap_pred.data
