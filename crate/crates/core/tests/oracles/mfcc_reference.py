"""Step-by-step MFCC reference (naive DFT, explicit loops).

Prints reference rows for the 440 Hz tone check in tests/features.rs.
Parameters: 8 kHz, 25 ms frames, 10 ms shift, 256-point DFT, 23 HTK mel
filters over 0..Nyquist, pre-emphasis 0.97, Hamming window, log floor 1e-10,
orthonormal DCT-II keeping 23 coefficients, centred frames with reflect padding.
"""
import math

SR = 8000
FRAME = 200
SHIFT = 80
NFFT = 256
NMEL = 23
NCEP = 23


def hz2mel(f):
    return 2595.0 * math.log10(1.0 + f / 700.0)


def mel2hz(m):
    return 700.0 * (10.0 ** (m / 2595.0) - 1.0)


def reflect(i, n):
    while i < 0 or i >= n:
        if i < 0:
            i = -i
        if i >= n:
            i = 2 * (n - 1) - i
    return i


def filterbank():
    lo, hi = hz2mel(0.0), hz2mel(SR / 2.0)
    pts = [mel2hz(lo + (hi - lo) * i / (NMEL + 1)) for i in range(NMEL + 2)]
    fb = []
    for m in range(NMEL):
        l, c, r = pts[m], pts[m + 1], pts[m + 2]
        row = []
        for k in range(NFFT // 2 + 1):
            f = k * SR / NFFT
            if l < f <= c:
                row.append((f - l) / (c - l))
            elif c < f < r:
                row.append((r - f) / (r - c))
            else:
                row.append(0.0)
        fb.append(row)
    return fb


def mfcc(x):
    n = len(x)
    t_count = (n + SHIFT // 2) // SHIFT
    fb = filterbank()
    out = []
    for t in range(t_count):
        start = t * SHIFT + SHIFT // 2 - FRAME // 2
        frame = [x[reflect(start + i, n)] for i in range(FRAME)]
        pre = [frame[0] - 0.97 * frame[0]] + [frame[i] - 0.97 * frame[i - 1] for i in range(1, FRAME)]
        win = [pre[i] * (0.54 - 0.46 * math.cos(2 * math.pi * i / (FRAME - 1))) for i in range(FRAME)]
        power = []
        for k in range(NFFT // 2 + 1):
            re = 0.0
            im = 0.0
            for i in range(FRAME):
                ang = -2.0 * math.pi * k * i / NFFT
                re += win[i] * math.cos(ang)
                im += win[i] * math.sin(ang)
            power.append(re * re + im * im)
        logmel = []
        for m in range(NMEL):
            e = sum(fb[m][k] * power[k] for k in range(len(power)))
            logmel.append(math.log(max(e, 1e-10)))
        row = []
        for c in range(NCEP):
            s = math.sqrt(1.0 / NMEL) if c == 0 else math.sqrt(2.0 / NMEL)
            row.append(s * sum(logmel[m] * math.cos(math.pi * c * (m + 0.5) / NMEL) for m in range(NMEL)))
        out.append(row)
    return out


if __name__ == "__main__":
    tone = [10000.0 * math.sin(2.0 * math.pi * 440.0 * i / SR) for i in range(SR)]
    rows = mfcc(tone)
    print("frames", len(rows))
    for t in (0, 50, 99):
        print(t, "[" + ", ".join(repr(v) for v in rows[t]) + "]")
