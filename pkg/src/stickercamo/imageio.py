"""PNG/JPEG reading and writing plus bilinear resampling for float RGB images."""

from pathlib import Path

import cv2
import numpy as np
import torch
import torch.nn.functional as F

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


def read_image(path):
    """Read an 8- or 16-bit image as float64 RGB (or single channel) in [0, 1]."""
    path = Path(path)
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise FileNotFoundError(f"cannot read image {path}")
    scale = 65535.0 if raw.dtype == np.uint16 else 255.0
    img = raw.astype(np.float64) / scale
    if img.ndim == 3:
        if img.shape[2] == 4:
            img = img[:, :, :3]
        img = img[:, :, ::-1].copy()
    return img


def write_image(path, image, bits=8):
    """Write a float image in [0, 1] (HxW or HxWx3) as an 8- or 16-bit PNG."""
    if isinstance(image, torch.Tensor):
        image = image.detach().cpu().numpy()
    image = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    if bits == 8:
        out = np.round(image * 255.0).astype(np.uint8)
    elif bits == 16:
        out = np.round(image * 65535.0).astype(np.uint16)
    else:
        raise ValueError("bits must be 8 or 16")
    if out.ndim == 3:
        out = np.ascontiguousarray(out[:, :, ::-1])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), out):
        raise OSError(f"cannot write image {path}")
    return path


def write_mask(path, mask):
    """Masks are stored strictly as {0, 255}."""
    mask = np.asarray(mask)
    return write_image(path, (mask > 0).astype(np.float64), bits=8)


def read_mask(path):
    m = read_image(path)
    if m.ndim == 3:
        m = m.mean(axis=2)
    return (m > 0.5).astype(np.uint8)


def resize_bilinear(image, size):
    """Resize an HxWxC (or HxW) image to ``size=(H, W)``; keeps tensors differentiable.

    Uses half-pixel centers (``align_corners=False``) and no antialiasing.
    """
    is_numpy = not isinstance(image, torch.Tensor)
    t = torch.as_tensor(image)
    if tuple(t.shape[:2]) == tuple(size):
        return image
    squeeze = t.ndim == 2
    if squeeze:
        t = t[:, :, None]
    if not t.is_floating_point():
        t = t.double()
    out = F.interpolate(t.permute(2, 0, 1)[None], size=tuple(size), mode="bilinear",
                        align_corners=False)[0].permute(1, 2, 0)
    if squeeze:
        out = out[:, :, 0]
    return out.numpy() if is_numpy else out


def list_images(directory):
    """All image files under ``directory`` (recursive), in sorted order."""
    directory = Path(directory)
    return sorted(p for p in directory.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES)


def image_grid(images, columns=4, pad=2):
    """Tile a list of HxWx3 float images into one montage (mid-gray padding)."""
    images = [np.asarray(i.detach().cpu() if isinstance(i, torch.Tensor) else i) for i in images]
    h, w = images[0].shape[:2]
    rows = (len(images) + columns - 1) // columns
    grid = np.full((rows * (h + pad) + pad, columns * (w + pad) + pad, 3), 0.5)
    for k, img in enumerate(images):
        if img.ndim == 2:
            img = np.repeat(img[:, :, None], 3, axis=2)
        r, c = divmod(k, columns)
        y, x = pad + r * (h + pad), pad + c * (w + pad)
        grid[y:y + h, x:x + w] = img
    return grid
