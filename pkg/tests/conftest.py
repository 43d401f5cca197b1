import numpy as np
import pytest

from swa_codec import tensor as tc


def numeric_grad(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``x`` (mutated in place)."""
    g = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        old = x[idx]
        x[idx] = old + eps
        up = f()
        x[idx] = old - eps
        down = f()
        x[idx] = old
        g[idx] = (up - down) / (2 * eps)
    return g


def check_op_grad(build, arrays, atol=1e-7, rtol=1e-6):
    """Compare ``backward`` of ``sum(build(*tensors) * w)`` with finite differences."""
    tensors = [tc.Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(*tensors)
    w = np.random.default_rng(7).normal(size=out.shape)

    def value():
        return float(np.sum(build(*[tc.Tensor(t.data) for t in tensors]).data * w))

    loss = tc.tensor_sum(tc.mul(out, w))
    grads = tc.backward(loss, tensors)
    for t, g in zip(tensors, grads):
        np.testing.assert_allclose(g, numeric_grad(value, t.data), atol=atol, rtol=rtol)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_params(config, seed=0, std=0.3):
    """Model parameters with every tensor perturbed, so no path is trivially zero."""
    from swa_codec.model import init_params

    params = init_params(config, seed, std=std)
    rng = np.random.default_rng(seed + 1)
    for name in params.names():
        t = params[name]
        if name.startswith("rate.") or name.endswith(("gain", "bias", ".b", "b1", "b2", "bias_table")):
            base = 1.0 if name.startswith("rate.") or name.endswith("gain") else 0.0
            t.data = base + std * rng.normal(size=t.shape)
    return params


def probe_violations(volume, params):
    """Perturb every token of ``volume``; count outputs that move when they must not.

    A prediction at scan position ``m`` may depend on token ``n`` only if
    ``n`` precedes ``m`` and lies within ``layers * window`` on every axis.
    """
    from swa_codec.model import forward_teacher_forced
    from swa_codec.swa import scan_coords

    L, H, W, C = volume.shape
    config = params.config
    reach = np.array([config.window.l_w, config.window.h_w, config.window.w_w]) * config.layers
    coords = scan_coords((L, H, W))
    T = len(coords)

    def outputs(v):
        p = forward_teacher_forced(v, params)
        return np.concatenate([p.mu.data, p.sigma.data, p.lrp.data], axis=1)

    base = outputs(volume)
    violations = 0
    for n in range(T):
        v = volume.copy()
        v[tuple(coords[n])] += 1.0 + np.arange(C)
        changed = np.any(outputs(v) != base, axis=1)
        allowed = (np.arange(T) > n) & np.all(np.abs(coords - coords[n]) <= reach, axis=1)
        violations += int(np.sum(changed & ~allowed))
    return violations


def decode_max_diff(volume, params, trim_cache=True):
    """Largest gap between teacher-forced and cached incremental predictions."""
    from swa_codec.model import DecodeSession, forward_teacher_forced

    L, H, W, _ = volume.shape
    pred = forward_teacher_forced(volume, params)
    session = DecodeSession(params, (H, W), trim_cache=trim_cache)
    worst = 0.0
    for l in range(L):
        got = session.decode_frame(volume[l])
        for a, b in zip(got, pred.frame(l)):
            worst = max(worst, float(np.max(np.abs(a - b))))
    return worst


ACCEPTANCE_LINES: list[str] = []


def report(criterion: int, title: str, passed: bool, detail: str) -> None:
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {criterion}: {title} :: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        def order(line):
            return int(line.split("criterion ")[1].split(":")[0]) if "criterion " in line else 99

        for line in sorted(ACCEPTANCE_LINES, key=order):
            terminalreporter.write_line(line)
