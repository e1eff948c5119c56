import numpy as np


def numeric_grad(f, arrays, h=1e-5):
    """Central finite differences of scalar ``f()`` w.r.t. each array (mutated in place)."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = a[idx]
            a[idx] = old + h
            fp = f()
            a[idx] = old - h
            fm = f()
            a[idx] = old
            g[idx] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def rel_error(analytic, numeric, floor=1e-8):
    a = np.asarray(analytic, dtype=float)
    n = np.asarray(numeric, dtype=float)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


ACCEPTANCE = {}  # criterion number -> one-line verdict, printed in the terminal summary


def verdict(num, name, ok, detail):
    line = f"criterion {num} ({name}): {'PASS' if ok else 'FAIL'} | {detail}"
    ACCEPTANCE[num] = line
    print(line)
    return line
