"""Recompute the frozen reference values used by the test-suite.

Every value here comes from an implementation that shares no code with the
package under test: plain Python loops, ``statistics.NormalDist``, torch for
the attention blocks and scikit-learn for the linear-probe check. Run once;
the outputs are committed next to this script.

    python tests/oracles/build_oracles.py
"""

import json
import math
import statistics
from pathlib import Path

import numpy as np

HERE = Path(__file__).parent


def adam_scalar():
    # one bias-corrected Adam step: w=1, g=1, lr=0.1
    b1, b2, eps, lr = 0.9, 0.999, 1e-8, 0.1
    m = (1 - b1) * 1.0
    v = (1 - b2) * 1.0
    mhat, vhat = m / (1 - b1), v / (1 - b2)
    return 1.0 - lr * mhat / (math.sqrt(vhat) + eps)


def quantile_750():
    xs = list(range(1, 1001))
    n = len(xs)
    levels = [(i + 0.5) / n for i in range(n)]
    # 750 sits exactly on a training value: rank index 749
    p = levels[xs.index(750)]
    return statistics.NormalDist().inv_cdf(p)


def layer_norm_row():
    row = [0.3, -1.7, 2.2, 0.05, 4.0, -0.9]
    mu = sum(row) / len(row)
    var = sum((v - mu) ** 2 for v in row) / len(row)
    return row, [(v - mu) / math.sqrt(var + 1e-5) for v in row]


def reglu_reference():
    rng = np.random.default_rng(123)
    x = rng.normal(size=(3, 4))
    up, gate, down = rng.normal(size=(4, 5)), rng.normal(size=(4, 5)), rng.normal(size=(5, 4))
    out = []
    for r in range(3):
        hidden = []
        for j in range(5):
            u = sum(x[r, i] * up[i, j] for i in range(4))
            g = sum(x[r, i] * gate[i, j] for i in range(4))
            hidden.append(u * max(g, 0.0))
        out.append([sum(hidden[j] * down[j, c] for j in range(5)) for c in range(4)])
    return {"x": x.tolist(), "up": up.tolist(), "gate": gate.tolist(), "down": down.tolist(), "out": out}


def param_counts():
    def total(L, d, n, f):
        return L * d * d * (4 * n + 3 * f)
    maya = total(15, 192, 4, 2)
    hs = total(15, 192, 1, 2)
    hd = total(15, 768, 1, 2)
    return {"P_MAYA": maya, "P_hidden_size": hs, "P_head_dim": hd,
            "ratio_hidden_size": round(hs / maya, 1), "ratio_head_dim": round(hd / maya, 1)}


def linear_probe():
    from sklearn.linear_model import LogisticRegression
    import sys
    sys.path.insert(0, str(HERE.parents[1] / "src"))
    from maya.synthetic import linear_classification
    accs = []
    for seed in range(5):
        x, y, _ = linear_classification(500, seed=seed)
        clf = LogisticRegression(C=1e4, max_iter=10000).fit(x, y)
        accs.append(float(clf.score(x, y)))
    return accs


def torch_blocks():
    """MBA block and IAIL block forward passes on fixed random parameters."""
    import torch
    rng = np.random.default_rng(7)
    n, d, h, B, T, f = 3, 8, 2, 2, 4, 6
    hd = d // h
    p = {k: rng.normal(scale=0.4, size=s) for k, s in {
        "wq": (n, d, d), "wk": (n, d, d), "wv": (n, d, d), "wo": (n, d, d),
        "bq": (n, 1, d), "bk": (n, 1, d), "bv": (n, 1, d), "bo": (n, 1, d),
        "up": (d, f), "gate": (d, f), "down": (f, d), "bup": (f,), "bgate": (f,), "bdown": (d,),
        "g": (n, d), "b": (n, d), "og": (d,), "ob": (d,), "x": (B, T, d)}.items()}
    wb = np.array([0.2, 0.5, 0.3])
    t = {k: torch.tensor(v, dtype=torch.float64) for k, v in p.items()}
    x = t["x"]
    ln = torch.nn.functional.layer_norm
    branches = []
    for j in range(n):
        def proj(w, b):
            return (x @ t[w][j] + t[b][j]).reshape(B, T, h, hd).transpose(1, 2)
        q, k, v = proj("wq", "bq"), proj("wk", "bk"), proj("wv", "bv")
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(hd), dim=-1)
        ctx = (att @ v).transpose(1, 2).reshape(B, T, d) @ t["wo"][j] + t["bo"][j]
        a = ctx + x
        ffn = ((a @ t["up"] + t["bup"]) * torch.relu(a @ t["gate"] + t["bgate"])) @ t["down"] + t["bdown"]
        branches.append(ln(ffn, (d,), t["g"][j], t["b"][j], 1e-5))
    mixed = sum(float(wb[j]) * branches[j] for j in range(n))
    y = ln(mixed + x, (d,), t["og"], t["ob"], 1e-5)

    # one IAIL block, self-masked, post-norm
    q_in = torch.tensor(rng.normal(size=(5, d)))
    z0 = torch.tensor(rng.normal(size=(5, d)))
    vals = torch.tensor(rng.normal(size=(5, d)))
    ip = {k: rng.normal(scale=0.4, size=s) for k, s in {
        "Wq": (d, d), "bq": (d,), "Wk": (d, d), "bk": (d,), "Wv": (d, d), "bv": (d,),
        "up": (d, f), "gate": (d, f), "down": (f, d), "bup": (f,), "bgate": (f,), "bdown": (d,)}.items()}
    it = {k: torch.tensor(v) for k, v in ip.items()}
    qp = q_in @ it["Wq"] + it["bq"]
    kp = z0 @ it["Wk"] + it["bk"]
    vp = vals @ it["Wv"] + it["bv"]
    logits = -torch.cdist(qp, kp) ** 2 / math.sqrt(d)
    logits = logits.masked_fill(torch.eye(5, dtype=torch.bool), float("-inf"))
    att = torch.softmax(logits, dim=-1) @ vp
    ones, zeros = torch.ones(d, dtype=torch.float64), torch.zeros(d, dtype=torch.float64)
    a = ln(q_in + att, (d,), ones, zeros, 1e-5)
    ffn = ((a @ it["up"] + it["bup"]) * torch.relu(a @ it["gate"] + it["bgate"])) @ it["down"] + it["bdown"]
    out = ln(a + ffn, (d,), ones, zeros, 1e-5)

    arrays = {f"mba_{k}": v for k, v in p.items()}
    arrays["mba_wb"] = wb
    arrays["mba_y"] = y.numpy()
    arrays["mba_branches"] = torch.stack(branches).numpy()
    arrays.update({f"iail_{k}": v for k, v in ip.items()})
    arrays.update({"iail_q": q_in.numpy(), "iail_z0": z0.numpy(), "iail_vals": vals.numpy(),
                   "iail_out": out.numpy()})
    return arrays


def main():
    row, normed = layer_norm_row()
    frozen = {
        "adam_scalar_step": adam_scalar(),
        "quantile_750_of_1_to_1000": quantile_750(),
        "layer_norm_row": row,
        "layer_norm_row_out": normed,
        "reglu": reglu_reference(),
        "param_counts": param_counts(),
        "linear_probe_train_accuracy": linear_probe(),
    }
    (HERE / "frozen.json").write_text(json.dumps(frozen, indent=1) + "\n")
    np.savez(HERE / "blocks.npz", **torch_blocks())


if __name__ == "__main__":
    main()
