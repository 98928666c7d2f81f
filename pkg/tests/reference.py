"""Loop-based reference metrics, written for clarity rather than speed."""


def trapezoid(f, a, b, panels):
    h = (b - a) / panels
    total = 0.5 * (f[0] + f[-1])
    stride = (len(f) - 1) // panels
    for i in range(1, panels):
        total += f[i * stride]
    return total * h


def romberg_ref(f, a=0.0, b=1.0):
    """Textbook Romberg table R[i][j] from samples on 2**m + 1 points."""
    m = (len(f) - 1).bit_length() - 1
    table = [[trapezoid(f, a, b, 2**i)] for i in range(m + 1)]
    for j in range(1, m + 1):
        for i in range(j, m + 1):
            r = table[i][j - 1] + (table[i][j - 1] - table[i - 1][j - 1]) / (4**j - 1)
            table[i].append(r)
    return table[m][m]


def amse_ref(pred, truth):
    n, k = len(pred), len(pred[0])
    total = 0.0
    for j in range(k):
        diff = 0.0
        for i in range(n):
            diff += pred[i][j] - truth[i][j]
        total += (diff / n) ** 2
    return total / k


def mise_ref(pred, truth):
    n = len(pred)
    total = 0.0
    for i in range(n):
        sq = [(p - q) ** 2 for p, q in zip(pred[i], truth[i])]
        total += romberg_ref(sq)
    return total / n


def _argmax_first(row):
    best = 0
    for j in range(1, len(row)):
        if row[j] > row[best]:
            best = j
    return best


def dpe_ref(pred, truth):
    total = 0.0
    for i in range(len(pred)):
        gap = truth[i][_argmax_first(truth[i])] - truth[i][_argmax_first(pred[i])]
        total += gap**2
    return total / len(pred)


def i_mse_ref(pred, truth):
    n, k = len(pred), len(pred[0])
    total = 0.0
    for i in range(n):
        for j in range(k):
            total += (pred[i][j] - truth[i][j]) ** 2
    return total / (n * k)
