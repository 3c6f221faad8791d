"""Independent oracles used across the test suite.

Everything here is deliberately written the slow, obvious way (nested loops,
direct formulas) so it cannot share bugs with the library's vectorized
implementations.
"""

import numpy as np

from hazefuse.tensor import Tape, backward


def conv2d_loops(x, w, bias=None):
    """Nested-loop correlation, stride 1, zero 'same' padding."""
    B, C, H, W = x.shape
    O, _, k, _ = w.shape
    pad = k // 2
    out = np.zeros((B, O, H, W))
    for b in range(B):
        for o in range(O):
            for h in range(H):
                for ww in range(W):
                    acc = 0.0
                    for c in range(C):
                        for i in range(k):
                            for j in range(k):
                                hh, wj = h + i - pad, ww + j - pad
                                if 0 <= hh < H and 0 <= wj < W:
                                    acc += w[o, c, i, j] * x[b, c, hh, wj]
                    out[b, o, h, ww] = acc
            if bias is not None:
                out[b, o] += bias[o]
    return out


def softmax_rows(m):
    e = np.exp(m - m.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def mhsa_oracle(x, heads, params):
    """Direct dense-matrix self-attention over spatial tokens, no autodiff."""
    B, C, H, W = x.shape
    d = C // heads
    n = H * W
    tok = x.reshape(B, C, n).transpose(0, 2, 1)
    q = tok @ params["q_w"] + params["q_b"]
    k = tok @ params["k_w"] + params["k_b"]
    v = tok @ params["v_w"] + params["v_b"]
    out = np.zeros((B, n, C))
    for b in range(B):
        for h in range(heads):
            sl = slice(h * d, (h + 1) * d)
            logits = q[b][:, sl] @ k[b][:, sl].T / np.sqrt(d)
            out[b][:, sl] = softmax_rows(logits) @ v[b][:, sl]
    return out.transpose(0, 2, 1).reshape(B, C, H, W)


def channel_attention_oracle(q, k, v):
    """Brute-force CxC channel attention for BCHW projections."""
    B, C, H, W = q.shape
    n = H * W
    out = np.zeros_like(q)
    for b in range(B):
        qa = q[b].reshape(C, n)
        ka = k[b].reshape(C, n)
        va = v[b].reshape(C, n)
        attn = softmax_rows(qa @ ka.T / np.sqrt(n))
        out[b] = (attn @ va).reshape(C, H, W)
    return out


def spatial_attention_oracle(q, k, v):
    """Brute-force HWxHW cross-attention for BCHW projections."""
    B, C, H, W = q.shape
    n = H * W
    out = np.zeros_like(q)
    for b in range(B):
        qa = q[b].reshape(C, n).T  # n x C tokens
        ka = k[b].reshape(C, n).T
        va = v[b].reshape(C, n).T
        attn = softmax_rows(qa @ ka.T / np.sqrt(C))
        out[b] = (attn @ va).T.reshape(C, H, W)
    return out


def fd_check(build_loss, tensors, h=1e-5, max_coords=4, rng=None):
    """Max relative error between analytic grads and central differences.

    build_loss must be a pure function of the tensors' current data. Up to
    max_coords coordinates per tensor are probed. rel err uses
    max(|analytic|, |numeric|, 1e-6) as denominator.
    """
    rng = rng or np.random.default_rng(0)
    for t in tensors:
        t.grad = None
    with Tape():
        loss = build_loss()
        backward(loss)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
                for t in tensors]
    worst = 0.0
    for t, ana in zip(tensors, analytic):
        n = t.data.size
        coords = rng.choice(n, size=min(max_coords, n), replace=False)
        flat = t.data.reshape(-1)
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + h
            lp = build_loss().item()
            flat[idx] = orig - h
            lm = build_loss().item()
            flat[idx] = orig
            numeric = (lp - lm) / (2.0 * h)
            a = ana.reshape(-1)[idx]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
            worst = max(worst, rel)
    return worst


def depth_histogram_modes(depth, bin_width=2.0):
    """Count local maxima of a coarse depth histogram (independent script)."""
    d = depth.ravel()
    edges = np.arange(d.min(), d.max() + bin_width, bin_width)
    if len(edges) < 3:
        return 1
    counts, _ = np.histogram(d, bins=edges)
    modes = 0
    for i, c in enumerate(counts):
        left = counts[i - 1] if i > 0 else 0
        right = counts[i + 1] if i < len(counts) - 1 else 0
        if c > 0 and c >= left and c >= right and (c > left or c > right):
            modes += 1
    return modes


def block_mean_pool(arr, factor):
    """Direct averaging over factor x factor blocks of a CxHxW array."""
    c, h, w = arr.shape
    out = np.zeros((c, h // factor, w // factor))
    for ci in range(c):
        for i in range(h // factor):
            for j in range(w // factor):
                out[ci, i, j] = arr[ci,
                                    i * factor : (i + 1) * factor,
                                    j * factor : (j + 1) * factor].mean()
    return out
