"""Shared oracles: finite differences and small random sequence factories."""

import numpy as np

from sslmtpp import autodiff as ad
from sslmtpp.data import GapScaler, MarkedSequence, make_batch


def numeric_grad(fn, arrays, index, eps=1e-5):
    """Central finite differences of scalar ``fn(*arrays)`` w.r.t. ``arrays[index]``."""
    x = arrays[index]
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        hi = fn(*arrays)
        x[i] = old - eps
        lo = fn(*arrays)
        x[i] = old
        grad[i] = (hi - lo) / (2 * eps)
    return grad


def relative_error(a, b, floor=1e-7):
    """Elementwise ``|a-b| / max(|a|, |b|, floor)``, worst case."""
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def assert_grad_close(fn_tensor, arrays, tol=1e-4, floor=1e-7, eps=1e-5):
    """Compare autodiff gradients of ``fn_tensor(*tensors)`` to finite differences for every input.

    Absolute errors below ``floor`` count as agreement near zero.
    """
    tensors = [ad.Tensor(a, requires_grad=True) for a in arrays]
    out = fn_tensor(*tensors)
    out.backward()

    def scalar(*arrs):
        with ad.no_grad():
            return fn_tensor(*[ad.Tensor(a) for a in arrs]).item()

    for k, t in enumerate(tensors):
        num = numeric_grad(scalar, [a.copy() for a in arrays], k, eps)
        got = t.grad if t.grad is not None else np.zeros_like(num)
        diff = np.abs(got - num)
        scale = np.maximum(np.abs(got), np.abs(num))
        bad = (diff > floor) & (diff > tol * scale)
        assert not bad.any(), f"input {k}: max rel err {relative_error(got, num, floor):.3e}"


def random_sequences(rng, n, num_classes=3, min_len=2, max_len=6, labeled=True, prefix="q"):
    out = []
    for i in range(n):
        k = int(rng.integers(min_len, max_len + 1))
        times = np.cumsum(rng.exponential(1.0, size=k) + 1e-3)
        markers = rng.integers(0, num_classes, size=k) if labeled else None
        out.append(MarkedSequence(f"{prefix}{i}", times, markers))
    return out


def batch_of(seqs, scaler=None):
    return make_batch(seqs, scaler or GapScaler(0.0, 1.0))


# ---------------------------------------------------------------------------
# gradient-check cases: each returns (scalar tensor function, input arrays)


def _shape(rng, ndim_lo=1, ndim_hi=3, dim_hi=4):
    return tuple(int(d) for d in rng.integers(1, dim_hi + 1, size=int(rng.integers(ndim_lo, ndim_hi + 1))))


def _weighted(out, w):
    # fixed random weights so every output element matters to the scalar
    return ad.sum(ad.mul(out, w))


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, margin * np.sign(x + 1e-12) + x, x)


def primitive_case(kind, rng):
    shape = _shape(rng)
    w = rng.normal(size=shape)
    if kind in ("add", "sub", "mul"):
        # the second operand is the full shape or a trailing suffix of it
        cut = int(rng.integers(0, len(shape) + 1))
        other = shape[cut:]
        op = {"add": ad.add, "sub": ad.sub, "mul": ad.mul}[kind]
        return (lambda a, b: _weighted(op(a, b), w)), [rng.normal(size=shape), rng.normal(size=other)]
    if kind in ("neg", "tanh", "sigmoid", "exp"):
        op = getattr(ad, kind)
        return (lambda a: _weighted(op(a), w)), [rng.normal(size=shape)]
    if kind == "log":
        return (lambda a: _weighted(ad.log(a), w)), [rng.uniform(0.2, 3.0, size=shape)]
    if kind == "abs":
        return (lambda a: _weighted(ad.abs(a), w)), [_away_from_zero(rng, shape)]
    if kind in ("softmax", "log_softmax"):
        op = getattr(ad, kind)
        return (lambda a: _weighted(op(a), w)), [rng.normal(size=shape)]
    if kind == "matmul":
        lead = _shape(rng, 1, 2)
        k, n = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        wo = rng.normal(size=lead + (n,))
        return (lambda a, b: _weighted(ad.matmul(a, b), wo)), [rng.normal(size=lead + (k,)), rng.normal(size=(k, n))]
    if kind in ("concat", "stack"):
        axis = int(rng.integers(0, len(shape)))
        if kind == "concat":
            second = list(shape)
            second[axis] = int(rng.integers(1, 4))
            arrays = [rng.normal(size=shape), rng.normal(size=tuple(second))]
            wo = rng.normal(size=np.concatenate(arrays, axis=axis).shape)
            return (lambda a, b: _weighted(ad.concat([a, b], axis=axis), wo)), arrays
        arrays = [rng.normal(size=shape), rng.normal(size=shape)]
        wo = rng.normal(size=np.stack(arrays, axis=axis).shape)
        return (lambda a, b: _weighted(ad.stack([a, b], axis=axis), wo)), arrays
    if kind == "slice":
        index = []
        for d in shape:
            lo = int(rng.integers(0, d))
            index.append(lo if rng.random() < 0.3 else np.s_[lo: int(rng.integers(lo + 1, d + 1))])
        index = tuple(index)
        x = rng.normal(size=shape)
        wo = rng.normal(size=x[index].shape)
        # the slice is used twice so overlapping region accumulation is exercised
        return (lambda a: ad.add(_weighted(ad.slice(a, index), wo), _weighted(ad.slice(a, index), wo))), [x]
    if kind == "take":
        rows, dim = int(rng.integers(1, 5)), int(rng.integers(1, 4))
        idx = rng.integers(0, rows, size=_shape(rng, 1, 2))
        wo = rng.normal(size=idx.shape + (dim,))
        return (lambda t: _weighted(ad.take(t, idx), wo)), [rng.normal(size=(rows, dim))]
    if kind == "reshape":
        x = rng.normal(size=shape)
        new = (x.size,) if rng.random() < 0.5 else (1, x.size)
        wo = rng.normal(size=new)
        return (lambda a: _weighted(ad.reshape(a, new), wo)), [x]
    if kind in ("sum", "mean"):
        axis = None if rng.random() < 0.3 else int(rng.integers(0, len(shape)))
        x = rng.normal(size=shape)
        op = getattr(ad, kind)
        wo = rng.normal(size=np.asarray(getattr(np, kind)(x, axis=axis)).shape)
        return (lambda a: _weighted(op(a, axis=axis), wo)), [x]
    raise KeyError(kind)


PRIMITIVES = ("add", "sub", "neg", "mul", "matmul", "tanh", "sigmoid", "exp", "log", "abs", "softmax",
              "log_softmax", "concat", "stack", "slice", "take", "reshape", "sum", "mean")


def layer_case(kind, rng):
    """Gradient-check case for one layer type; weights are inputs so they are checked too."""
    from sslmtpp.layers import Dense, Embedding, RecurrentCell, RecurrentState, cell_step, dropout_apply, stack_unroll

    B = int(rng.integers(1, 4))
    if kind.startswith("dense"):
        act = kind.split(":")[1]
        act = None if act == "none" else act
        i, o = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        layer = Dense(i, o, act, rng)
        wo = rng.normal(size=(B, o))

        def fn(x, W, b):
            layer.weight, layer.bias = W, b
            return _weighted(layer(x), wo)

        return fn, [rng.normal(size=(B, i)), layer.weight.data.copy(), layer.bias.data.copy()]
    if kind == "embedding":
        M, dim = int(rng.integers(2, 5)), int(rng.integers(1, 4))
        table = Embedding(M, dim, rng)
        idx = rng.integers(0, M, size=(B, 3))
        wo = rng.normal(size=(B, 3, dim))

        def fn(W):
            table.weight = W
            return _weighted(table(idx), wo)

        return fn, [table.weight.data.copy()]
    if kind in ("plain", "lstm"):
        i, h = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        cell = RecurrentCell(kind, i, h, rng)
        wo = rng.normal(size=(B, h))
        wc = rng.normal(size=(B, h))

        def fn(x, h0, c0, wx, wh, b):
            cell.w_x, cell.w_h, cell.b = wx, wh, b
            state = RecurrentState(h0, c0 if kind == "lstm" else None)
            out, new = cell_step(cell, x, state)
            # two steps so the recurrent weights enter nonlinearly
            out, new = cell_step(cell, x, new)
            loss = _weighted(out, wo)
            if kind == "lstm":
                loss = ad.add(loss, _weighted(new.c, wc))
            return loss

        arrays = [rng.normal(size=(B, i)), rng.normal(size=(B, h)), rng.normal(size=(B, h)),
                  cell.w_x.data.copy(), cell.w_h.data.copy(), cell.b.data.copy()]
        return fn, arrays
    if kind == "stack":
        depth, T, i = int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(1, 3))
        dims = [i] + [int(rng.integers(1, 4)) for _ in range(depth)]
        cells = [RecurrentCell("lstm", dims[k], dims[k + 1], rng) for k in range(depth)]
        wo = rng.normal(size=(B, T, dims[-1]))

        def fn(x, *weights):
            for k, cell in enumerate(cells):
                cell.w_x, cell.w_h, cell.b = weights[3 * k: 3 * k + 3]
            return _weighted(stack_unroll(cells, x), wo)

        arrays = [rng.normal(size=(B, T, i))] + [p.data.copy() for c in cells for p in c.parameters()]
        return fn, arrays
    if kind == "dropout":
        shape = (B, int(rng.integers(1, 6)))
        seed = int(rng.integers(0, 2**31))
        rate = float(rng.uniform(0.0, 0.9))
        wo = rng.normal(size=shape)

        def fn(x):
            # the same mask on every evaluation
            return _weighted(dropout_apply(ad.tanh(x), rate, True, np.random.default_rng(seed)), wo)

        return fn, [rng.normal(size=shape)]
    raise KeyError(kind)


LAYER_KINDS = ("dense:none", "dense:tanh", "dense:sigmoid", "dense:softmax", "embedding", "plain", "lstm",
               "stack", "dropout")


def tiny_model_config(**overrides):
    from sslmtpp.model import ModelConfig

    base = dict(num_classes=3, hidden_dim=3, num_layers=2, marker_embed_dim=2, encoder_dim=2,
                encoder_layers=2, head_dim=3, dropout=0.0, lam=0.5)
    base.update(overrides)
    return ModelConfig(**base)


def check_model_branch(model, loss_fn, names, rng, probes=4, tol=1e-4, floor=1e-7, eps=1e-5):
    """Finite-difference check of ``loss_fn()`` w.r.t. random entries of the named parameters.

    Returns the number of entries compared.
    """
    params = model.parameters()
    model.zero_grad()
    loss_fn().backward()
    checked = 0
    for name in names:
        p = params[name]
        grad = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for j in rng.choice(flat.size, size=min(probes, flat.size), replace=False):
            old = flat[j]
            with ad.no_grad():
                flat[j] = old + eps
                hi = loss_fn().item()
                flat[j] = old - eps
                lo = loss_fn().item()
            flat[j] = old
            num = (hi - lo) / (2 * eps)
            got = grad.reshape(-1)[j]
            diff = abs(got - num)
            assert diff <= floor or diff <= tol * max(abs(got), abs(num)), \
                f"{name}[{j}]: analytic {got:.10g} vs numeric {num:.10g}"
            checked += 1
    return checked


# ---------------------------------------------------------------------------
# independent numpy reference of the network, one sequence at a time


def _sig(x):
    return 1.0 / (1.0 + np.exp(-x))


def _ref_lstm(params, prefix, xs, layers):
    seq = xs
    for k in range(layers):
        wx, wh, b = (params[f"{prefix}.{k}.{n}"] for n in ("w_x", "w_h", "b"))
        H = wh.shape[0]
        h, c = np.zeros(H), np.zeros(H)
        out = []
        for x in seq:
            z = x @ wx + b + h @ wh
            i, f, o, g = _sig(z[:H]), _sig(z[H:2 * H]), _sig(z[2 * H:3 * H]), np.tanh(z[3 * H:])
            c = f * c + i * g
            h = o * np.tanh(c)
            out.append(h)
        seq = out
    return seq


def _ref_rnn(params, prefix, xs, layers, init=None):
    """Returns the top-layer outputs and each layer's last hidden state."""
    seq, finals = xs, []
    for k in range(layers):
        wx, wh, b = (params[f"{prefix}.{k}.{n}"] for n in ("w_x", "w_h", "b"))
        h = np.zeros(wh.shape[0]) if init is None else init[k]
        out = []
        for x in seq:
            h = np.tanh(x @ wx + b + h @ wh)
            out.append(h)
        seq = out
        finals.append(h)
    return seq, finals


def _ref_mlp(params, prefix, x):
    h = np.tanh(x @ params[f"{prefix}.0.weight"] + params[f"{prefix}.0.bias"])
    return h @ params[f"{prefix}.1.weight"] + params[f"{prefix}.1.bias"]


def reference_sequence_terms(params, config, seq, scaler):
    """Per-sequence sums: (cross-entropy sum, abs-error sum, n targets, squared-error sum, n events)."""
    feats = scaler.transform(seq.gaps())
    k = feats.size
    emb = params["marker_embedding.weight"][seq.markers]
    xs = [np.concatenate(([feats[t]], emb[t])) for t in range(k)]
    f = _ref_lstm(params, "lstm", xs, config.num_layers)
    enc, finals = _ref_rnn(params, "encoder", [np.array([v]) for v in feats], config.encoder_layers)
    ce = ae = 0.0
    for j in range(k - 1):
        fused = f[j] + config.lam * enc[j] if config.lam else f[j]
        logits = _ref_mlp(params, "marker_head", fused)
        logp = logits - logits.max() - np.log(np.sum(np.exp(logits - logits.max())))
        ce -= logp[seq.markers[j + 1]]
        ae += abs(_ref_mlp(params, "time_head", fused)[0] - feats[j + 1])
    prev = np.concatenate(([0.0], feats[:-1]))
    dec, _ = _ref_rnn(params, "decoder", [np.array([v]) for v in prev], config.encoder_layers, init=finals)
    recon = [(h @ params["decoder.out.weight"] + params["decoder.out.bias"])[0] for h in dec]
    se = float(np.sum((np.array(recon) - feats) ** 2))
    return ce, ae, k - 1, se, k


def reference_composite(params, config, labeled, unlabeled, scaler):
    """Marker, time and reconstruction terms and their sum, from first principles."""
    ce = ae = n_t = se = n_e = 0.0
    for s in labeled:
        a, b, c, d, e = reference_sequence_terms(params, config, s, scaler)
        ce, ae, n_t, se, n_e = ce + a, ae + b, n_t + c, se + d, n_e + e
    for s in unlabeled:
        dummy = MarkedSequence(s.seq_id, s.times, np.zeros(len(s), dtype=np.int64))
        *_, d, e = reference_sequence_terms(params, config, dummy, scaler)
        se, n_e = se + d, n_e + e
    terms = {"marker": ce / n_t, "time": ae / n_t, "recon": se / n_e}
    terms["total"] = terms["marker"] + terms["time"] + terms["recon"]
    return terms
