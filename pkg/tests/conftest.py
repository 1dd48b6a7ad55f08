"""Shared independent reference implementations for oracle tests.

These are deliberately written as pure-Python scalar loops (math module,
no numpy vectorization) so they share nothing with the library's compute
path beyond the formulas themselves.
"""
import math


def scalar_sigmoid(v: float) -> float:
    return 1.0 / (1.0 + math.exp(-v))


def _mat_vec(mat, vec):
    return [sum(row[j] * vec[j] for j in range(len(vec))) for row in mat]


def scalar_gru_step(x, g_prev, p):
    """Scalar-loop GRU step; p maps names to nested Python lists."""
    d_g = len(g_prev)
    wz_x = _mat_vec(p["w_z"], x)
    uz_g = _mat_vec(p["u_z"], g_prev)
    wr_x = _mat_vec(p["w_r"], x)
    ur_g = _mat_vec(p["u_r"], g_prev)
    w_x = _mat_vec(p["w"], x)
    u_g = _mat_vec(p["u"], g_prev)
    out = []
    for i in range(d_g):
        z = scalar_sigmoid(wz_x[i] + p["b_z"][i] + uz_g[i])
        r = scalar_sigmoid(wr_x[i] + p["b_r"][i] + ur_g[i])
        cand = math.tanh(w_x[i] + p["b"][i] + r * (u_g[i] + p["b_n"][i]))
        out.append(cand + z * (g_prev[i] - cand))
    return out


def scalar_lstm_step(x, g_prev, c_prev, p):
    """Scalar-loop LSTM step; returns (hidden, cell) lists."""
    d_g = len(g_prev)
    pre = {k: _mat_vec(p["w_" + k], x) for k in ("i", "f", "m", "o")}
    rec = {k: _mat_vec(p["u_" + k], g_prev) for k in ("i", "f", "m", "o")}
    g_out, c_out = [], []
    for i in range(d_g):
        gate_i = scalar_sigmoid(pre["i"][i] + p["b_i"][i] + rec["i"][i])
        gate_f = scalar_sigmoid(pre["f"][i] + p["b_f"][i] + rec["f"][i])
        squash = math.tanh(pre["m"][i] + p["b_m"][i] + rec["m"][i])
        gate_o = scalar_sigmoid(pre["o"][i] + p["b_o"][i] + rec["o"][i])
        c = gate_f * c_prev[i] + gate_i * squash
        c_out.append(c)
        g_out.append(gate_o * math.tanh(c))
    return g_out, c_out


def nested(arr):
    """numpy array -> nested Python lists of floats."""
    return arr.tolist()
