""" Grids, coordinate conventions and keypoints shared by every other module.

Pixel (col i, row j) has its center at (i * g, j * g); the origin is the center of
the top-left pixel and x grows along columns, y along rows.
"""
import dataclasses
import functools
import math

import numpy as np
import torch

SEED_MASK = (1 << 64) - 1


@dataclasses.dataclass(frozen=True)
class GridGeometry:
    width: int
    height: int
    pixel_size: float = 1.0
    image_scale: float = 1.0

    def __post_init__(self):
        if self.width < 2 or self.height < 2:
            raise ValueError(f'grid must be at least 2x2, got {self.width}x{self.height}')
        if not self.pixel_size > 0:
            raise ValueError(f'pixel_size must be positive, got {self.pixel_size}')
        if not self.image_scale >= 1:
            raise ValueError(f'image_scale must be >= 1, got {self.image_scale}')

    @property
    def shape(self):
        """ (height, width), the numpy shape of a heatmap on this grid."""
        return self.height, self.width

    @property
    def n_pixels(self):
        return self.width * self.height

    @property
    def max_x(self):
        return (self.width - 1) * self.pixel_size

    @property
    def max_y(self):
        return (self.height - 1) * self.pixel_size

    @functools.cached_property
    def _centers(self):
        rows, cols = np.divmod(np.arange(self.n_pixels), self.width)
        centers = np.stack([cols * self.pixel_size, rows * self.pixel_size], axis=1).astype(np.float64)
        centers.setflags(write=False)
        return centers

    def centers(self):
        """ Return the (H*W, 2) array of pixel centers in row-major order."""
        return self._centers

    def pixel_index(self, col, row):
        """ Row-major flat index of pixel (col, row)."""
        if not (0 <= col < self.width and 0 <= row < self.height):
            raise IndexError(f'pixel ({col}, {row}) is outside a {self.width}x{self.height} grid')
        return row * self.width + col

    def to_image_coords(self, x, y):
        """ Heatmap coordinates to input-image pixel coordinates."""
        return x / self.pixel_size * self.image_scale, y / self.pixel_size * self.image_scale

    def to_heatmap_coords(self, u, v):
        return u / self.image_scale * self.pixel_size, v / self.image_scale * self.pixel_size


@dataclasses.dataclass(frozen=True, eq=False)
class Heatmap:
    """ An HxW grid of raw (unbounded) predictions for one joint.

    The values array is copied to float64 and made read-only on construction.
    """
    geometry: GridGeometry
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.shape != self.geometry.shape:
            raise ValueError(f'heatmap values have shape {values.shape}, expected {self.geometry.shape}')
        if not np.all(np.isfinite(values)):
            raise ValueError('heatmap values must be finite')
        values.setflags(write=False)
        object.__setattr__(self, 'values', values)

    @classmethod
    def zeros(cls, geometry):
        return cls(geometry=geometry, values=np.zeros(geometry.shape))

    def flat(self):
        return self.values.reshape(-1)

    def __eq__(self, other):
        if not isinstance(other, Heatmap):
            return NotImplemented
        return self.geometry == other.geometry and np.array_equal(self.values, other.values)

    def __repr__(self):
        return f'{self.__class__.__name__}(geometry={self.geometry!r}, sum={self.values.sum():.6g})'


@dataclasses.dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    visible: bool = True

    @property
    def xy(self):
        return self.x, self.y


@dataclasses.dataclass(frozen=True)
class PoseInstance:
    joints: tuple
    heatmaps: tuple

    def __post_init__(self):
        object.__setattr__(self, 'joints', tuple(self.joints))
        object.__setattr__(self, 'heatmaps', tuple(self.heatmaps))
        if len(self.joints) != len(self.heatmaps):
            raise ValueError(f'{len(self.joints)} joints but {len(self.heatmaps)} heatmaps')
        if not self.heatmaps:
            raise ValueError('a pose instance needs at least one joint')
        geometries = {h.geometry for h in self.heatmaps}
        if len(geometries) != 1:
            raise ValueError('all heatmaps of a pose instance must share one geometry')

    @property
    def geometry(self):
        return self.heatmaps[0].geometry

    @property
    def n_joints(self):
        return len(self.joints)

    def stacked(self):
        """ Return the heatmap values as one (K, H, W) array."""
        return np.stack([h.values for h in self.heatmaps])


def pixel_center(geometry, col, row):
    if not (0 <= col < geometry.width and 0 <= row < geometry.height):
        raise IndexError(f'pixel ({col}, {row}) is outside a {geometry.width}x{geometry.height} grid')
    return col * geometry.pixel_size, row * geometry.pixel_size


def clamp_keypoint(kp, geometry):
    """ Clamp a keypoint into the convex hull of the pixel centers."""
    x = min(max(kp.x, 0.0), geometry.max_x)
    y = min(max(kp.y, 0.0), geometry.max_y)
    return Keypoint(x=float(x), y=float(y), visible=kp.visible)


def containing_pixel(kp, geometry):
    """ (col, row) of the pixel whose center is nearest to the keypoint.

    Half-pixel ties resolve toward the smaller index.
    """
    g = geometry.pixel_size
    col = min(max(math.ceil(kp.x / g - 0.5), 0), geometry.width - 1)
    row = min(max(math.ceil(kp.y / g - 0.5), 0), geometry.height - 1)
    return col, row


def make_rng(seed):
    return np.random.default_rng(seed & SEED_MASK)


def make_generator(seed):
    """ A seeded CPU torch.Generator; never touches torch's global RNG."""
    return torch.Generator().manual_seed(seed & SEED_MASK)


def spawn_seeds(seed, n):
    """ n independent 64-bit child seeds derived deterministically from seed."""
    children = np.random.SeedSequence(seed & SEED_MASK).spawn(n)
    return [int(child.generate_state(1, dtype=np.uint64)[0]) for child in children]
