import numpy as np


def directional_gradcheck(build, tensors, rng, eps=1e-6, tol=1e-4, floor=1e-3):
    """Check analytic grads of a scalar loss against central differences.

    ``build()`` recomputes the loss from the current tensor values. For each
    tensor a random unit direction v probes d/dt loss(x + t v) at t = 0; the
    finite-difference slope must match <grad, v>. Probing directions instead
    of coordinates keeps slopes O(1) so the relative comparison is immune to
    cancellation noise on tiny individual entries.
    """
    for t in tensors:
        t.zero_grad()
    loss = build()
    loss.backward()
    failures = []
    for i, t in enumerate(tensors):
        v = rng.normal(size=t.data.shape)
        v /= np.sqrt((v * v).sum()) + 1e-300
        grad = t.grad if t.grad is not None else np.zeros_like(t.data)
        analytic = float((grad * v).sum())
        saved = t.data.copy()
        t.data[...] = saved + eps * v
        up = build().item()
        t.data[...] = saved - eps * v
        down = build().item()
        t.data[...] = saved
        fd = (up - down) / (2.0 * eps)
        rel = abs(analytic - fd) / max(abs(analytic), abs(fd), floor)
        if rel >= tol:
            failures.append((i, analytic, fd, rel))
    assert not failures, f"gradient mismatches: {failures}"
