"""Shared oracles for the test-suite."""

import numpy as np

from recam import tensor as T


def numeric_grad(f, x: np.ndarray, step: float = 1e-4) -> np.ndarray:
    """Central finite differences of scalar ``f()`` with respect to array ``x`` (modified in place)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + step
        up = f()
        x[idx] = old - step
        down = f()
        x[idx] = old
        grad[idx] = (up - down) / (2 * step)
    return grad


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    """||a-b|| / (||a|| + ||b||), the usual whole-tensor gradient-check ratio."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), floor))


def check_grads(loss_fn, params, step: float = 1e-4, tol: float = 1e-4):
    """Compare analytic and numeric gradients of ``loss_fn()`` for every tensor in ``params``.

    Returns the worst relative error seen.
    """
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()

        def f():
            with T.no_grad():
                return float(loss_fn().data)

        numeric = numeric_grad(f, p.data, step)
        err = rel_error(analytic, numeric)
        assert err <= tol, f"{p.name or p.shape}: relative error {err:.3g}"
        worst = max(worst, err)
    return worst


def tiny_model(data, kind="bi-attn", seed=0, d=8, max_len=32, frozen=True, init_std=0.35, **kw):
    """A small model whose vocabulary covers every token of ``data``."""
    from recam.encoder import EncoderConfig, build_vocab
    from recam.model import MultipleChoiceModel

    texts = [" ".join([i.article, i.question, *i.options]) for i in data]
    vocab = build_vocab(texts, 10_000)
    cfg = EncoderConfig(vocab_size=len(vocab), d_hidden=d, num_heads=2, d_ff=2 * d,
                        max_seq_len=max_len, freeze_encoder=frozen)
    return MultipleChoiceModel(vocab, cfg, kind, seed=seed, head_init_std=init_std, **kw)
