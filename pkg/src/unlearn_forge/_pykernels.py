"""Pure-Python twins of the compiled kernels in ``_ckernels.pyx``."""


def lcs_length(a, b):
    n, m = len(a), len(b)
    if n == 0 or m == 0:
        return 0
    b = list(b)
    row = [0] * (m + 1)
    for ai in a:
        diag = 0
        for j in range(m):
            up = row[j + 1]
            if ai == b[j]:
                best = diag + 1
            else:
                best = up if up > row[j] else row[j]
            diag = up
            row[j + 1] = best
    return row[m]


def ks_statistic(a, b):
    """Sup-norm ECDF distance; both inputs must be sorted ascending."""
    na, nb = len(a), len(b)
    i = j = 0
    d = 0.0
    while i < na and j < nb:
        v = min(a[i], b[j])
        while i < na and a[i] == v:
            i += 1
        while j < nb and b[j] == v:
            j += 1
        d = max(d, abs(i / na - j / nb))
    return d
