"""Differentiable building blocks and the two loss primitives."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, DimensionError, Tensor


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Module:
    """Parameter container: every Tensor attribute is a parameter, sub-modules
    are walked recursively, and names are dotted paths in sorted order."""

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, val in vars(self).items():
            if isinstance(val, Tensor):
                out[key] = val
            elif isinstance(val, Module):
                for sub, p in val.named_parameters().items():
                    out[f"{key}.{sub}"] = p
        return dict(sorted(out.items()))

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def freeze(self) -> None:
        """Drop gradient buffers and stop tracking; the model becomes a constant."""
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None

    def zero_parameters(self) -> None:
        for p in self.parameters():
            p.data[...] = 0.0

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        if set(params) != set(state):
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            raise DimensionError(f"parameter names differ; missing={missing} unexpected={extra}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise DimensionError(f"{name}: checkpoint shape {arr.shape} vs model {p.shape}")
            p.data[...] = arr


class LinearLayer(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        self.weight = uniform_init(rng, (n_in, n_out), n_in)
        self.bias = uniform_init(rng, (n_out,), n_in)

    @property
    def n_in(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        return linear_forward(self, x)


def linear_forward(layer: LinearLayer, x: Tensor) -> Tensor:
    """``x @ W + b`` over the last axis; leading axes are flattened and restored."""
    if x.shape[-1:] != (layer.n_in,):
        raise DimensionError(f"linear: input {x.shape} vs weight {layer.weight.shape}")
    if x.ndim == 2:
        return ad.add_bias(ad.matmul(x, layer.weight), layer.bias)
    lead = x.shape[:-1]
    flat = ad.reshape(x, (int(np.prod(lead)), layer.n_in))
    out = ad.add_bias(ad.matmul(flat, layer.weight), layer.bias)
    return ad.reshape(out, lead + (layer.weight.shape[1],))


class MlpBlock(Module):
    """Two linear layers with a ReLU between them and no output activation."""

    def __init__(self, n_in: int, n_hidden: int, n_out: int, rng: np.random.Generator):
        self.fc1 = LinearLayer(n_in, n_hidden, rng)
        self.fc2 = LinearLayer(n_hidden, n_out, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return mlp_forward(self, x)


def mlp_forward(block: MlpBlock, x: Tensor) -> Tensor:
    return block.fc2(ad.relu(block.fc1(x)))


class EmbeddingTable(Module):
    def __init__(self, vocab_size: int, dim: int, rng: np.random.Generator):
        # rows are dim-wide vectors, so bound by 1/sqrt(dim)
        self.rows = uniform_init(rng, (vocab_size, dim), dim)

    @property
    def vocab_size(self) -> int:
        return self.rows.shape[0]

    def __call__(self, ids) -> Tensor:
        return embedding_lookup(self, ids)


def embedding_lookup(table: EmbeddingTable, ids) -> Tensor:
    """Row gather. Raises IndexError naming the offending id."""
    return ad.gather_rows(table.rows, np.asarray(ids, dtype=np.int64))


class GruLayer(Module):
    """Single-layer GRU: h_t = (1 - z) * h_{t-1} + z * candidate."""

    def __init__(self, n_in: int, hidden_size: int, rng: np.random.Generator):
        H = hidden_size
        self.W_z = uniform_init(rng, (n_in, H), H)
        self.W_r = uniform_init(rng, (n_in, H), H)
        self.W_h = uniform_init(rng, (n_in, H), H)
        self.U_z = uniform_init(rng, (H, H), H)
        self.U_r = uniform_init(rng, (H, H), H)
        self.U_h = uniform_init(rng, (H, H), H)
        self.b_z = uniform_init(rng, (H,), H)
        self.b_r = uniform_init(rng, (H,), H)
        self.b_h = uniform_init(rng, (H,), H)

    @property
    def hidden_size(self) -> int:
        return self.U_z.shape[0]

    def run(self, x: Tensor, lengths=None, h0: Tensor | None = None) -> tuple[Tensor, Tensor]:
        """Batched recurrence over ``x`` of shape [B x T x in].

        With ``lengths``, steps at or past an example's length leave its state
        untouched, so ``final`` is the state after its last real token.
        Returns (states [B x T x H], final [B x H]).
        """
        if x.ndim != 3:
            raise DimensionError(f"gru: expected [batch x T x in], got {x.shape}")
        B, T, n_in = x.shape
        if T < 1:
            raise ContractError("gru: empty sequence")
        if n_in != self.W_z.shape[0]:
            raise DimensionError(f"gru: input width {n_in} vs W_z {self.W_z.shape}")
        H = self.hidden_size
        h = h0 if h0 is not None else Tensor.zeros((B, H))
        if h.shape != (B, H):
            raise DimensionError(f"gru: h0 {h.shape} vs expected {(B, H)}")

        flat = ad.reshape(x, (B * T, n_in))

        def project(W, b):
            return ad.reshape(ad.add_bias(ad.matmul(flat, W), b), (B, T, H))

        xz, xr, xh = project(self.W_z, self.b_z), project(self.W_r, self.b_r), project(self.W_h, self.b_h)
        lengths = None if lengths is None else np.asarray(lengths)
        states = []
        for t in range(T):
            z = ad.sigmoid(xz[:, t, :] + ad.matmul(h, self.U_z))
            r = ad.sigmoid(xr[:, t, :] + ad.matmul(h, self.U_r))
            cand = ad.tanh(xh[:, t, :] + ad.matmul(r * h, self.U_h))
            # (1 - z) * h + z * cand, written with fewer nodes
            h_new = h + z * (cand - h)
            if lengths is not None and (lengths <= t).any():
                live = np.repeat((lengths > t).astype(np.float64)[:, None], H, axis=1)
                h = Tensor(live) * h_new + Tensor(1.0 - live) * h
            else:
                h = h_new
            states.append(h)
        return ad.stack(states, axis=1), h


def gru_forward(gru: GruLayer, seq: Tensor, h0: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """Unbatched GRU over seq [T x in]; returns (states [T x H], final [H]).

    ``h0`` ([H]) defaults to zeros.
    """
    if seq.ndim != 2:
        raise DimensionError(f"gru_forward: expected [T x in], got {seq.shape}")
    if seq.shape[0] < 1:
        raise ContractError("gru_forward: empty sequence")
    T, n_in = seq.shape
    H = gru.hidden_size
    h0b = None if h0 is None else ad.reshape(h0, (1, H))
    states, final = gru.run(ad.reshape(seq, (1, T, n_in)), h0=h0b)
    return ad.reshape(states, (T, H)), ad.reshape(final, (H,))


class TopDownAttention(Module):
    """Additive attention: score_i = w . relu(W_k^T k_i + W_q^T q)."""

    def __init__(self, d_query: int, d_key: int, d_hidden: int, rng: np.random.Generator):
        self.W_k = uniform_init(rng, (d_key, d_hidden), d_key)
        self.W_q = uniform_init(rng, (d_query, d_hidden), d_query)
        self.w = uniform_init(rng, (d_hidden,), d_hidden)

    def __call__(self, query, keys, values=None, mask=None):
        return self.run(query, keys, keys if values is None else values, mask)

    def run(self, query: Tensor, keys: Tensor, values: Tensor, mask=None) -> tuple[Tensor, Tensor]:
        """Batched: query [B x dq], keys [B x K x dk], values [B x K x dv].

        ``mask`` [B x K] marks valid keys. Returns (context [B x dv], weights [B x K]).
        """
        if keys.ndim != 3 or values.ndim != 3 or query.ndim != 2:
            raise DimensionError(f"attend: query {query.shape}, keys {keys.shape}, values {values.shape}")
        B, K, dk = keys.shape
        if K < 1:
            raise ContractError("attend: no keys")
        if values.shape[:2] != (B, K) or query.shape[0] != B:
            raise DimensionError(f"attend: query {query.shape}, keys {keys.shape}, values {values.shape}")
        if dk != self.W_k.shape[0] or query.shape[1] != self.W_q.shape[0]:
            raise DimensionError(f"attend: keys {keys.shape} / query {query.shape} vs W_k {self.W_k.shape} / W_q {self.W_q.shape}")
        Dh = self.W_k.shape[1]
        kp = ad.reshape(ad.matmul(ad.reshape(keys, (B * K, dk)), self.W_k), (B, K, Dh))
        qp = ad.broadcast_to(ad.reshape(ad.matmul(query, self.W_q), (B, 1, Dh)), (B, K, Dh))
        hidden = ad.relu(kp + qp)
        scores = ad.reshape(ad.matmul(ad.reshape(hidden, (B * K, Dh)), ad.reshape(self.w, (Dh, 1))), (B, K))
        weights = ad.softmax_rows(scores, mask)
        dv = values.shape[2]
        w3 = ad.broadcast_to(ad.reshape(weights, (B, K, 1)), (B, K, dv))
        context = ad.sum(w3 * values, axis=1)
        return context, weights


def attend(att: TopDownAttention, query: Tensor, keys: Tensor, values: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """Unbatched: query [dq], keys [K x dk], values [K x dv] -> (context [dv], weights [K])."""
    values = keys if values is None else values
    if keys.ndim != 2 or keys.shape[0] < 1:
        raise ContractError(f"attend: need at least one key, got keys {keys.shape}")
    if values.ndim != 2 or values.shape[0] != keys.shape[0]:
        raise DimensionError(f"attend: keys {keys.shape} vs values {values.shape}")
    K = keys.shape[0]
    ctx, w = att.run(
        ad.reshape(query, (1, query.shape[0])),
        ad.reshape(keys, (1,) + keys.shape),
        ad.reshape(values, (1,) + values.shape),
    )
    return ad.reshape(ctx, (values.shape[1],)), ad.reshape(w, (K,))


def bce_with_logits(logits: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy over every entry, in the overflow-free form
    max(z, 0) - z*y + log(1 + exp(-|z|))."""
    y = labels.data if isinstance(labels, Tensor) else np.asarray(labels, dtype=np.float64)
    if y.shape != logits.shape:
        raise DimensionError(f"bce: logits {logits.shape} vs labels {y.shape}")
    z = logits.data
    n = z.size
    loss = (np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))).sum() / n
    s = ad._sigmoid_np(z)

    def bw(g):
        return ((s - y) * (g / n),)

    return ad.make_node(np.asarray(loss), (logits,), bw, "bce")


def l2_feature_loss(z_teacher: Tensor, z_student: Tensor) -> Tensor:
    """Squared Frobenius distance, divided by the batch size (leading axis).

    The teacher side is always treated as a constant.
    """
    if z_teacher.shape != z_student.shape:
        raise DimensionError(f"l2: teacher {z_teacher.shape} vs student {z_student.shape}")
    batch = z_student.shape[0] if z_student.ndim > 1 else 1
    diff = z_student - z_teacher.detach()
    return ad.scale(ad.sum(diff * diff), 1.0 / batch)
