"""Slow reference implementations used only by the tests.

They are written from the textbook definitions with explicit loops and
share no code with the package.
"""

import math

import numpy as np

K1, K2, WINDOW, SIGMA = 0.01, 0.03, 11, 1.5
MS_WEIGHTS = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333]


def gaussian_window(size=WINDOW, sigma=SIGMA):
    w = np.zeros((size, size))
    c = (size - 1) / 2
    for i in range(size):
        for j in range(size):
            w[i, j] = math.exp(-((i - c) ** 2 + (j - c) ** 2) / (2 * sigma ** 2))
    return w / w.sum()


def patch_stats(x, y, i, j, win):
    n = win.shape[0]
    px, py = x[i:i + n, j:j + n], y[i:i + n, j:j + n]
    mx, my = np.sum(win * px), np.sum(win * py)
    vx = np.sum(win * (px - mx) ** 2)
    vy = np.sum(win * (py - my) ** 2)
    cxy = np.sum(win * (px - mx) * (py - my))
    return mx, my, vx, vy, cxy


def ssim_factors(x, y, data_range=1.0):
    """Per-patch (luminance, contrast, structure) maps, one patch per valid
    window position."""
    c1, c2 = (K1 * data_range) ** 2, (K2 * data_range) ** 2
    c3 = c2 / 2
    win = gaussian_window()
    h, w = x.shape
    n = win.shape[0]
    lum = np.zeros((h - n + 1, w - n + 1))
    con = np.zeros_like(lum)
    struct = np.zeros_like(lum)
    for i in range(h - n + 1):
        for j in range(w - n + 1):
            mx, my, vx, vy, cxy = patch_stats(x, y, i, j, win)
            sx, sy = math.sqrt(vx), math.sqrt(vy)
            lum[i, j] = (2 * mx * my + c1) / (mx ** 2 + my ** 2 + c1)
            con[i, j] = (2 * sx * sy + c2) / (vx + vy + c2)
            struct[i, j] = (cxy + c3) / (sx * sy + c3)
    return lum, con, struct


def ssim(x, y):
    lum, con, struct = ssim_factors(np.asarray(x, float), np.asarray(y, float))
    return float(np.mean(lum * con * struct))


def halve(x):
    h, w = x.shape
    out = np.zeros((h // 2, w // 2))
    for i in range(h // 2):
        for j in range(w // 2):
            out[i, j] = (x[2 * i, 2 * j] + x[2 * i + 1, 2 * j] + x[2 * i, 2 * j + 1] + x[2 * i + 1, 2 * j + 1]) / 4
    return out


def ms_ssim(x, y, scales):
    x, y = np.asarray(x, float), np.asarray(y, float)
    weights = np.array(MS_WEIGHTS[:scales])
    weights = weights / weights.sum()
    value = 1.0
    for j in range(scales):
        lum, con, struct = ssim_factors(x, y)
        if j < scales - 1:
            factor = np.mean(con * struct)
            x, y = halve(x), halve(y)
        else:
            factor = np.mean(lum * con * struct)
        value *= max(factor, 1e-6) ** weights[j]
    return value


def average_precision(scores, labels):
    """Sum over distinct thresholds of (recall gain) * precision."""
    pairs = sorted(zip(scores, labels), key=lambda p: -p[0])
    positives = sum(labels)
    tp = fp = 0
    ap, last_recall = 0.0, 0.0
    i = 0
    while i < len(pairs):
        s = pairs[i][0]
        while i < len(pairs) and pairs[i][0] == s:
            tp += pairs[i][1]
            fp += 1 - pairs[i][1]
            i += 1
        recall = tp / positives
        ap += (recall - last_recall) * tp / (tp + fp)
        last_recall = recall
    return ap


def matched_filter_peak(image, tmpl, subpixel=False):
    """(row, col) maximising the correlation of ``image`` with ``tmpl``
    centred on that pixel; zero padding, FFT based.

    With ``subpixel`` each axis is refined by a parabola through the peak
    and its two neighbours, for targets placed off the pixel grid.
    """
    n, m = image.shape[0], tmpl.shape[0]
    size = (n + m, n + m)
    full = np.fft.irfft2(np.fft.rfft2(image - image.mean(), size) * np.fft.rfft2(tmpl[::-1, ::-1], size), size)
    c = (m - 1) // 2
    valid = full[c:c + n, c:c + n]
    r, col = np.unravel_index(int(valid.argmax()), valid.shape)
    if not subpixel:
        return r, col

    def vertex(a, b, c):
        den = a - 2 * b + c
        return 0.0 if den == 0 else 0.5 * (a - c) / den

    dr = vertex(valid[r - 1, col], valid[r, col], valid[r + 1, col]) if 0 < r < n - 1 else 0.0
    dc = vertex(valid[r, col - 1], valid[r, col], valid[r, col + 1]) if 0 < col < n - 1 else 0.0
    return r + dr, col + dc


# Published topology at 256x256 input, written out from the layer table:
# (name, channels, spatial extent); the trunk is a 1024-channel 8x8 map.
PUBLISHED_TABLE = [
    ("input1", 1, 256), ("conv1a", 16, 256), ("conv1b", 16, 256), ("pool1", 16, 128),
    ("conv2a", 32, 128), ("conv2b", 32, 128), ("pool2", 32, 64),
    ("conv3a", 64, 64), ("conv3b", 64, 64), ("pool3", 64, 32),
    ("conv4a", 128, 32), ("conv4b", 128, 32), ("pool4", 128, 16),
    ("conv5a", 256, 16), ("conv5b", 256, 16),
    ("up1", 256, 32), ("conv6a", 128, 32), ("merge1", 256, 32), ("conv6b", 128, 32), ("conv6c", 128, 32),
    ("up2", 128, 64), ("conv7a", 64, 64), ("merge2", 128, 64), ("conv7b", 64, 64), ("conv7c", 64, 64),
    ("up3", 64, 128), ("conv8a", 32, 128), ("merge3", 64, 128), ("conv8b", 32, 128), ("conv8c", 32, 128),
    ("up4", 32, 256), ("conv9a", 16, 256), ("merge4", 32, 256), ("conv9b", 16, 256), ("conv9c", 16, 256),
    ("conv9d", 2, 256), ("conv9e", 1, 256), ("lambda1", 1, 256),
    ("densenet1", 1024, 8),
    ("conv10", 256, 8), ("conv11", 128, 8), ("conv12", 64, 8),
]
