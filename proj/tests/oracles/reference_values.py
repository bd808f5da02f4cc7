"""Independent reference values for the unit tests.

Run with `python3 tests/oracles/reference_values.py`; the printed numbers are
the ones frozen into the C++ tests.
"""
import math
from fractions import Fraction

import numpy as np

M64 = (1 << 64) - 1


def splitmix64(x):
    x = (x + 0x9E3779B97F4A7C15) & M64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & M64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & M64
    return x ^ (x >> 31)


class Pcg32:
    MULT = 6364136223846793005

    def __init__(self, seed, stream_id):
        self.seed, self.stream_id = seed, stream_id
        self.inc = ((stream_id << 1) | 1) & M64
        self.state = 0
        self._step()
        self.state = (self.state + seed) & M64
        self._step()
        self.spare = None

    def _step(self):
        self.state = (self.state * self.MULT + self.inc) & M64

    def derive(self, tag):
        return Pcg32(self.seed, splitmix64(self.stream_id ^ splitmix64((tag + 0x632BE59BD9B4E019) & M64)))

    def u32(self):
        old = self.state
        self._step()
        xorshifted = (((old >> 18) ^ old) >> 27) & 0xFFFFFFFF
        rot = old >> 59
        return ((xorshifted >> rot) | (xorshifted << ((32 - rot) & 31))) & 0xFFFFFFFF

    def u64(self):
        hi = self.u32()
        return (hi << 32) | self.u32()

    def uniform(self):
        return (self.u64() >> 11) * 2.0**-53

    def normal(self):
        if self.spare is not None:
            s, self.spare = self.spare, None
            return s
        u1 = 1.0 - self.uniform()
        u2 = self.uniform()
        r = math.sqrt(-2.0 * math.log(u1))
        self.spare = r * math.sin(2 * math.pi * u2)
        return r * math.cos(2 * math.pi * u2)


def ms_ssim(a, b, scales=3, window=7, sigma=1.5):
    weights = np.array([0.0448, 0.2856, 0.3001, 0.2363, 0.1333])[:scales]
    weights = weights / weights.sum()
    d = np.arange(window) - (window - 1) / 2
    g = np.exp(-d * d / (2 * sigma * sigma))
    g /= g.sum()
    k2 = np.outer(g, g)
    c1, c2 = 0.01**2, 0.03**2

    def filt(x):
        h, w = x.shape
        out = np.zeros((h - window + 1, w - window + 1))
        for i in range(window):
            for j in range(window):
                out += k2[i, j] * x[i : i + out.shape[0], j : j + out.shape[1]]
        return out

    total = 0.0
    for c in range(a.shape[0]):
        pa, pb = a[c], b[c]
        value = 1.0
        for s in range(scales):
            ma, mb = filt(pa), filt(pb)
            va = filt(pa * pa) - ma * ma
            vb = filt(pb * pb) - mb * mb
            cov = filt(pa * pb) - ma * mb
            cs = (2 * cov + c2) / (va + vb + c2)
            lum = (2 * ma * mb + c1) / (ma * ma + mb * mb + c1)
            term = (lum * cs).mean() if s == scales - 1 else cs.mean()
            value *= max(term, 0.0) ** weights[s]
            if s < scales - 1:
                pa = 0.25 * (pa[0::2, 0::2] + pa[0::2, 1::2] + pa[1::2, 0::2] + pa[1::2, 1::2])
                pb = 0.25 * (pb[0::2, 0::2] + pb[0::2, 1::2] + pb[1::2, 0::2] + pb[1::2, 1::2])
        total += value
    return total / a.shape[0]


def test_images(h=32, w=32):
    c, y, x = np.meshgrid(np.arange(3), np.arange(h), np.arange(w), indexing="ij")
    a = 0.5 + 0.4 * np.sin(0.3 * x + 0.2 * y + c)
    b = np.clip(a + 0.05 * np.cos(0.7 * x - 0.4 * y + 0.5 * c), 0.0, 1.0)
    return a, b


def index_bits(nc, ns):
    return max(1, math.ceil(math.log2(nc * ns)))


def main():
    r = Pcg32(42, 0)
    print("pcg32(42,0) u32:", [r.u32() for _ in range(4)])
    r = Pcg32(42, 0)
    print("pcg32(42,0) normal:", repr(r.normal()), repr(r.normal()))
    r = Pcg32(7, 3).derive(5)
    print("pcg32(7,3).derive(5) u32:", r.u32())

    print("sigma2(5 dB):", repr(1.0 / 10 ** 0.5))

    lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
    m = (1 - b1) * 1.0
    v = (1 - b2) * 1.0
    print("adam step1 delta:", repr(lr * (m / (1 - b1)) / (math.sqrt(v / (1 - b2)) + eps)))

    for nc in (30, 50, 70, 90):
        bits = index_bits(nc, 28)
        print(f"N_C={nc}: bits={bits} symbols/index={math.ceil(bits * 3)}")

    print("24 x 512 at 512x512 BCR:", Fraction(24 * 512 // 2, 3 * 512 * 512))
    print("28-vector BCR:", Fraction(28 * 512 // 2, 3 * 512 * 512), float(Fraction(28 * 512 // 2, 3 * 512 * 512)))
    analog = 18 * 512 // 2
    digital = math.ceil(Fraction(10 * index_bits(50, 28), 1) / Fraction(1, 3))
    print("N_S=28, 10 hits:", analog, digital, Fraction(analog + digital, 3 * 512 * 512))

    a, b = test_images()
    print("ms_ssim(test pair):", repr(ms_ssim(a, b)))
    print("ms_ssim(a, a):", repr(ms_ssim(a, a)))
    mse = ((a - b) ** 2).mean()
    print("psnr(test pair):", repr(10 * math.log10(1.0 / mse)))


if __name__ == "__main__":
    main()
