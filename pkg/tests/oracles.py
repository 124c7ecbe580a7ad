"""Plain-Python reference implementations used as independent test oracles."""
import math


def softmax_list(xs):
    m = max(xs)
    e = [math.exp(x - m) for x in xs]
    s = sum(e)
    return [v / s for v in e]


def kl_loop(p, q, eps=1e-12):
    total = 0.0
    for pi, qi in zip(p, q):
        if pi > 0:
            total += pi * (math.log(max(pi, eps)) - math.log(max(qi, eps)))
    return total


def entropy_loop(p, eps=1e-12):
    return -sum(pi * math.log(max(pi, eps)) for pi in p)


def cross_entropy_loop(logits, labels):
    total = 0.0
    for row, y in zip(logits, labels):
        m = max(row)
        lse = m + math.log(sum(math.exp(v - m) for v in row))
        total += lse - row[y]
    return total / len(labels)


def conv_loop(x, kernel, stride, padding, bias=None):
    """x: L_in x d_in nested lists, kernel: k x d_in x d_out."""
    l_in, d_in = len(x), len(x[0])
    k, d_out = len(kernel), len(kernel[0][0])
    padded = [[0.0] * d_in] * padding + [list(r) for r in x] + [[0.0] * d_in] * padding
    l_out = (l_in + 2 * padding - k) // stride + 1
    out = []
    for t in range(l_out):
        row = []
        for o in range(d_out):
            acc = bias[o] if bias is not None else 0.0
            for j in range(k):
                for i in range(d_in):
                    acc += padded[t * stride + j][i] * kernel[j][i][o]
            row.append(acc)
        out.append(row)
    return out


def attention_loop(q, k, v):
    d = len(q[0])
    out = []
    for qr in q:
        scores = [sum(a * b for a, b in zip(qr, kr)) / math.sqrt(d) for kr in k]
        w = softmax_list(scores)
        out.append([sum(w[j] * v[j][c] for j in range(len(v))) for c in range(len(v[0]))])
    return out


def weighted_f1_loop(preds, labels, num_classes):
    n = len(labels)
    total = 0.0
    for c in range(num_classes):
        tp = sum(1 for p, y in zip(preds, labels) if p == c and y == c)
        fp = sum(1 for p, y in zip(preds, labels) if p == c and y != c)
        fn = sum(1 for p, y in zip(preds, labels) if p != c and y == c)
        support = tp + fn
        f1 = 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0
        total += f1 * support
    return total / n


def topk_ratio_loop(probs, k, threshold):
    hits = 0
    for row in probs:
        top = sorted(row, reverse=True)[:k]
        if sum(top) >= threshold:
            hits += 1
    return hits / len(probs)


def linear_loop(rows, weight, bias):
    """rows: n x d_in, weight: d_out x d_in (torch layout)."""
    return [[bias[o] + sum(r[i] * weight[o][i] for i in range(len(r))) for o in range(len(weight))] for r in rows]


def distillation_loop(teachers, student):
    """teachers: list of (P rows L x C, w length L); student rows L x C."""
    total = 0.0
    for p_rows, w in teachers:
        for t in range(len(student)):
            total += w[t] * kl_loop(p_rows[t], student[t])
    return total


def gelu_loop(v):
    return 0.5 * v * (1 + math.erf(v / math.sqrt(2)))


def layer_norm_loop(row, weight, bias, eps=1e-5):
    mu = sum(row) / len(row)
    var = sum((v - mu) ** 2 for v in row) / len(row)
    return [(v - mu) / math.sqrt(var + eps) * w + b for v, w, b in zip(row, weight, bias)]
