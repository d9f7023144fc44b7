"""Reference computations written independently of the package.

Everything here uses plain ``math``/numpy loops or closed forms so the
tests compare two separate derivations instead of one function with itself.
"""

import math

import numpy as np


def sigma_at(t, sigma_min=0.002, sigma_max=80.0, rho=7.0):
    a = sigma_min ** (1.0 / rho)
    b = sigma_max ** (1.0 / rho)
    return (a + t * (b - a)) ** rho


def scalings(sigma, sigma_min=0.002, sigma_data=0.5):
    skip = sigma_data**2 / ((sigma - sigma_min) ** 2 + sigma_data**2)
    out = sigma_data * (sigma - sigma_min) / math.sqrt(sigma**2 + sigma_data**2)
    cin = 1.0 / math.sqrt(sigma**2 + sigma_data**2)
    return skip, out, cin


def naive_dft_frame(frame):
    """Direct O(n^2) DFT of one frame, bins 0..n/2."""
    n = len(frame)
    k = np.arange(n // 2 + 1)[:, None]
    j = np.arange(n)[None, :]
    return (np.exp(-2j * np.pi * k * j / n) * frame[None, :]).sum(axis=1)


def periodic_hann(n):
    return np.array([0.5 - 0.5 * math.cos(2 * math.pi * i / n) for i in range(n)])


def si_sdr_loop(ref, est):
    dot = sum(float(a) * float(b) for a, b in zip(ref, est))
    energy = sum(float(a) ** 2 for a in ref)
    target = [dot / energy * float(a) for a in ref]
    noise = [t - float(b) for t, b in zip(target, est)]
    return 10 * math.log10(sum(t * t for t in target) / sum(e * e for e in noise))


# --- parameter counting from the architecture description ------------------


def _conv(cin, cout, k=3, dims=2):
    return cin * cout * k**dims + cout


def _gn(c):
    return 2 * c


def _lin(a, b):
    return a * b + b


def _res(cin, cout, emb=None, dims=2):
    n = _gn(cin) + _conv(cin, cout, 3, dims) + _gn(cout) + _conv(cout, cout, 3, dims)
    if emb:
        n += _lin(emb, cout)
    if cin != cout:
        n += _conv(cin, cout, 1, dims)
    return n


def _attn(c):
    return _gn(c) + _conv(c, 3 * c, 1) + _conv(c, c, 1)


def _stage(cin, cout, blocks, emb, attn):
    n = 0
    for i in range(blocks):
        n += _res(cin if i == 0 else cout, cout, emb)
        if attn:
            n += _attn(cout)
    return n


def parameter_count(d_lat, base, mults, res_unet, res_encdec, attn_levels, embed, ch1d, res_1d, freq_bins, cross_down=False):
    ch = [base * m for m in mults]
    top = len(ch) - 1
    f_top = freq_bins // 2**top
    att = [lvl in attn_levels for lvl in range(len(ch))]

    enc = _conv(2, ch[0])
    cin = ch[0]
    for lvl, c in enumerate(ch):
        enc += _stage(cin, c, res_encdec, None, att[lvl])
        cin = c
    enc += _conv(ch[top] * f_top, ch1d, 1, 1) + res_1d * _res(ch1d, ch1d, dims=1) + _gn(ch1d) + _conv(ch1d, d_lat, 1, 1)

    dec = _conv(d_lat, ch1d, 1, 1) + res_1d * _res(ch1d, ch1d, dims=1) + _gn(ch1d) + _conv(ch1d, ch[top] * f_top, 1, 1)
    for lvl in range(top, -1, -1):
        dec += _stage(ch[lvl], ch[lvl], res_encdec, None, att[lvl])
        if lvl > 0 and ch[lvl] != ch[lvl - 1]:
            dec += _conv(ch[lvl], ch[lvl - 1], 1)

    unet = 2 * _lin(embed, embed)  # noise embedding MLP
    unet += 2 * (_lin(embed, embed) + _lin(embed, freq_bins))  # input / output frequency scaling
    unet += _conv(2, ch[0])
    cin = ch[0]
    for lvl, c in enumerate(ch):
        unet += _stage(cin, c, res_unet, embed, att[lvl])
        cin = c
    unet += 2 * _res(ch[top], ch[top], embed) + (_attn(ch[top]) if att[top] else 0)
    for lvl in range(top, -1, -1):
        if lvl < top and ch[lvl + 1] != ch[lvl]:
            unet += _conv(ch[lvl + 1], ch[lvl], 1)
        unet += _conv(ch[lvl], ch[lvl], 1)  # cross connection
        unet += _stage(ch[lvl], ch[lvl], res_unet, embed, att[lvl])
        if cross_down:
            unet += _conv(ch[lvl], ch[lvl], 1)
    unet += _gn(ch[0]) + _conv(ch[0], 2)
    return enc + dec + unet
