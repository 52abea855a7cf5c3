"""Scalar reference formulas written with ``math`` only.

Nothing here touches the package; distributions come in as plain lists of
probabilities, one per response position.
"""
import math


def log_sigmoid(z):
    return -math.log1p(math.exp(-z)) if z >= 0 else z - math.log1p(math.exp(z))


def kl(p, q):
    return sum(pi * (math.log(pi) - math.log(qi)) for pi, qi in zip(p, q) if pi > 0)


def log_ratios(pol, ref, toks):
    return [math.log(p[y]) - math.log(q[y]) for p, q, y in zip(pol, ref, toks)]


def seq_lp(dists, toks):
    return sum(math.log(d[y]) for d, y in zip(dists, toks))


def sparsepo(c, r, beta, mu_c, mu_r, md_c, md_r):
    """``c``/``r`` are dicts with pol, ref (lists of distributions) and toks."""
    lr_c = log_ratios(c["pol"], c["ref"], c["toks"])
    lr_r = log_ratios(r["pol"], r["ref"], r["toks"])
    kl_c = [kl(p, q) for p, q in zip(c["pol"], c["ref"])]
    kl_r = [kl(p, q) for p, q in zip(r["pol"], r["ref"])]
    u = beta * (sum(m * x for m, x in zip(mu_c, lr_c)) - sum(m * x for m, x in zip(mu_r, lr_r)))
    delta = beta * (sum(m * x for m, x in zip(md_c, kl_c)) - sum(m * x for m, x in zip(md_r, kl_r)))
    return -log_sigmoid(u - delta)


def tdpo1(c, r, beta):
    return sparsepo(c, r, beta, [1] * len(c["toks"]), [1] * len(r["toks"]),
                    [1] * len(c["toks"]), [1] * len(r["toks"]))


def tdpo2(c, r, beta, alpha):
    lr = sum(log_ratios(c["pol"], c["ref"], c["toks"])) - sum(log_ratios(r["pol"], r["ref"], r["toks"]))
    kl_c = sum(kl(p, q) for p, q in zip(c["pol"], c["ref"]))
    kl_r = sum(kl(p, q) for p, q in zip(r["pol"], r["ref"]))
    return -log_sigmoid(beta * lr - alpha * beta * (kl_r - kl_c))


def dpo(c, r, beta):
    lr = sum(log_ratios(c["pol"], c["ref"], c["toks"])) - sum(log_ratios(r["pol"], r["ref"], r["toks"]))
    return -log_sigmoid(beta * lr)


def simpo(c, r, beta, gamma):
    avg_c = seq_lp(c["pol"], c["toks"]) / len(c["toks"])
    avg_r = seq_lp(r["pol"], r["toks"]) / len(r["toks"])
    return -log_sigmoid(beta * (avg_c - avg_r) - gamma)


def dpop(c, r, beta, lam):
    lr = sum(log_ratios(c["pol"], c["ref"], c["toks"])) - sum(log_ratios(r["pol"], r["ref"], r["toks"]))
    pen = max(0.0, seq_lp(c["ref"], c["toks"]) - seq_lp(c["pol"], c["toks"]))
    return -log_sigmoid(beta * lr - lam * pen)


def mapo_mask(site_means, eps):
    """``site_means[g][t]``: dimension-averaged activation of site g at token t."""
    n = len(site_means[0])
    std_sites = []
    for a in site_means:
        mu = sum(a) / n
        sd = math.sqrt(sum((x - mu) ** 2 for x in a) / n)
        std_sites.append([(x - mu) / math.sqrt(sd * sd + 1e-24) for x in a])
    raw = [sum(s[t] for s in std_sites) / len(std_sites) for t in range(n)]
    return [min(1.0, max(eps, x)) for x in raw]


def learned_mask(hidden, ws, bs, w_o, eps):
    """``hidden[l][t]``: hidden vector of layer l at token t; one ReLU unit per layer."""
    out = []
    for t in range(len(hidden[0])):
        units = [max(0.0, sum(h * w for h, w in zip(hidden[l][t], ws[l])) + bs[l])
                 for l in range(len(ws))]
        out.append(min(1.0, max(eps, max(0.0, sum(u * w for u, w in zip(units, w_o))))))
    return out
