"""Hot numeric kernels with numba and pure-numpy implementations.

The two genuinely loop-bound paths in this package are the analytic
ray-sphere renderer and the windowed filter behind SSIM; both carry an
njit kernel plus a vectorized numpy fallback. Everything matmul-shaped
elsewhere stays on BLAS through numpy.

Backend selection: the LACET_BACKEND environment variable ("auto",
"numba", "numpy"; default "auto") picks the implementation at import
time; `set_backend` overrides at runtime (used by tests and the bench
command). Requesting "numba" without numba installed is an error; "auto"
falls back to numpy silently.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        return wrap


_BACKEND = "numpy"


def set_backend(name: str) -> None:
    global _BACKEND
    if name == "auto":
        name = "numba" if HAVE_NUMBA else "numpy"
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba backend requested but numba is not installed")
    _BACKEND = name


def get_backend() -> str:
    return _BACKEND


set_backend(os.environ.get("LACET_BACKEND", "auto"))


# -- ray-sphere renderer ---------------------------------------------------

_RAY_TMIN = 1e-6


@njit(cache=True)
def _render_frame_numba(centers, radii, albedos, bg_bottom, bg_top, sky_axis,
                        light, ambient, rot, origin, fx, fy, cx, cy, h, w):
    img = np.empty((h, w, 3), dtype=np.float64)
    n = centers.shape[0]
    for i in range(h):
        for j in range(w):
            dx = (j + 0.5 - cx) / fx
            dy = (i + 0.5 - cy) / fy
            wx = rot[0, 0] * dx + rot[0, 1] * dy + rot[0, 2]
            wy = rot[1, 0] * dx + rot[1, 1] * dy + rot[1, 2]
            wz = rot[2, 0] * dx + rot[2, 1] * dy + rot[2, 2]
            inv = 1.0 / np.sqrt(wx * wx + wy * wy + wz * wz)
            wx *= inv
            wy *= inv
            wz *= inv

            best_t = np.inf
            best = -1
            for s in range(n):
                ox = origin[0] - centers[s, 0]
                oy = origin[1] - centers[s, 1]
                oz = origin[2] - centers[s, 2]
                b = ox * wx + oy * wy + oz * wz
                c0 = ox * ox + oy * oy + oz * oz - radii[s] * radii[s]
                disc = b * b - c0
                if disc > 0.0:
                    t = -b - np.sqrt(disc)
                    if t > _RAY_TMIN and t < best_t:
                        best_t = t
                        best = s
            if best >= 0:
                px = origin[0] + best_t * wx - centers[best, 0]
                py = origin[1] + best_t * wy - centers[best, 1]
                pz = origin[2] + best_t * wz - centers[best, 2]
                rinv = 1.0 / radii[best]
                nx = px * rinv
                ny = py * rinv
                nz = pz * rinv
                lam = nx * light[0] + ny * light[1] + nz * light[2]
                if lam < 0.0:
                    lam = 0.0
                shade = ambient + (1.0 - ambient) * lam
                for c in range(3):
                    img[i, j, c] = albedos[best, c] * shade
            else:
                sky = 0.5 * (wx * sky_axis[0] + wy * sky_axis[1] + wz * sky_axis[2] + 1.0)
                for c in range(3):
                    img[i, j, c] = bg_bottom[c] * (1.0 - sky) + bg_top[c] * sky
    return img


def _render_frame_numpy(centers, radii, albedos, bg_bottom, bg_top, sky_axis,
                        light, ambient, rot, origin, fx, fy, cx, cy, h, w):
    jj, ii = np.meshgrid(np.arange(w), np.arange(h))
    dx = (jj + 0.5 - cx) / fx
    dy = (ii + 0.5 - cy) / fy
    dirs = (rot[:, 0] * dx[..., None] + rot[:, 1] * dy[..., None] + rot[:, 2])
    dirs /= np.sqrt((dirs ** 2).sum(-1, keepdims=True))

    best_t = np.full((h, w), np.inf)
    best = np.full((h, w), -1, dtype=np.int64)
    for s in range(centers.shape[0]):
        oc = origin - centers[s]
        b = dirs @ oc
        c0 = oc @ oc - radii[s] * radii[s]
        disc = b * b - c0
        hit = disc > 0.0
        t = np.where(hit, -b - np.sqrt(np.where(hit, disc, 0.0)), np.inf)
        closer = (t > _RAY_TMIN) & (t < best_t)
        best_t = np.where(closer, t, best_t)
        best = np.where(closer, s, best)

    sky = 0.5 * (dirs @ sky_axis + 1.0)
    img = bg_bottom * (1.0 - sky[..., None]) + bg_top * sky[..., None]

    hit_mask = best >= 0
    if hit_mask.any():
        hi = best[hit_mask]
        pts = origin + best_t[hit_mask, None] * dirs[hit_mask]
        normals = (pts - centers[hi]) / radii[hi][:, None]
        lam = np.maximum(normals @ light, 0.0)
        shade = ambient + (1.0 - ambient) * lam
        img[hit_mask] = albedos[hi] * shade[:, None]
    return img


def render_frame(centers, radii, albedos, bg_bottom, bg_top, sky_axis, light,
                 ambient, c2w, fx, fy, cx, cy, h, w, backend=None):
    """Render one frame: nearest ray-sphere hit, Lambertian shading,
    vertical background gradient along the sky axis."""
    if fx == 0 or fy == 0:
        raise ValueError("degenerate intrinsics")
    args = (np.ascontiguousarray(centers, dtype=np.float64),
            np.ascontiguousarray(radii, dtype=np.float64),
            np.ascontiguousarray(albedos, dtype=np.float64),
            np.asarray(bg_bottom, dtype=np.float64),
            np.asarray(bg_top, dtype=np.float64),
            np.asarray(sky_axis, dtype=np.float64),
            np.asarray(light, dtype=np.float64),
            float(ambient),
            np.ascontiguousarray(c2w[:3, :3], dtype=np.float64),
            np.ascontiguousarray(c2w[:3, 3], dtype=np.float64),
            float(fx), float(fy), float(cx), float(cy), int(h), int(w))
    if (backend or _BACKEND) == "numba":
        return _render_frame_numba(*args)
    return _render_frame_numpy(*args)


# -- windowed filtering (SSIM statistics) ----------------------------------

@njit(cache=True)
def _filter2d_valid_numba(img, kern):
    h, w = img.shape
    kh, kw = kern.shape
    oh, ow = h - kh + 1, w - kw + 1
    out = np.empty((oh, ow), dtype=np.float64)
    for i in range(oh):
        for j in range(ow):
            acc = 0.0
            for a in range(kh):
                for b in range(kw):
                    acc += img[i + a, j + b] * kern[a, b]
            out[i, j] = acc
    return out


def _filter2d_valid_numpy(img, kern):
    windows = np.lib.stride_tricks.sliding_window_view(img, kern.shape)
    return np.einsum("ijab,ab->ij", windows, kern)


def filter2d_valid(img: np.ndarray, kern: np.ndarray, backend=None) -> np.ndarray:
    """2-D correlation, valid mode, float64."""
    img = np.ascontiguousarray(img, dtype=np.float64)
    kern = np.ascontiguousarray(kern, dtype=np.float64)
    if img.shape[0] < kern.shape[0] or img.shape[1] < kern.shape[1]:
        raise ValueError("image smaller than the filter window")
    if (backend or _BACKEND) == "numba":
        return _filter2d_valid_numba(img, kern)
    return _filter2d_valid_numpy(img, kern)
