""" Distributions and ground-truth heatmaps built from predictions and dot annotations.

Suppliers come from a predicted heatmap (relu, then L1 normalization). Demanders come
from a sub-pixel dot annotation, either as four bilinear masses on the 2x2 block of
pixel centers that brackets the dot, or as a single unit mass on the containing pixel.
Dots outside the hull of pixel centers are clamped into it before any encoding.
"""
import dataclasses
import enum
import logging
import math

import numpy as np

from hmatch.errors import EncodingError
from hmatch.grid import Heatmap, clamp_keypoint, containing_pixel

logger = logging.getLogger(__name__)

DEGENERATE_MASS = 1e-12


class PeakConvention(enum.Enum):
    PEAK_ONE = 'peak-one'
    SUBPIXEL = 'sub-pixel'


class DemanderMode(enum.Enum):
    SUBPIXEL = 'subpixel'
    NAIVE = 'naive'


@dataclasses.dataclass(frozen=True)
class GaussianSpec:
    sigma: float = 2.0
    peak_convention: PeakConvention = PeakConvention.PEAK_ONE

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f'sigma must be positive, got {self.sigma}')
        object.__setattr__(self, 'peak_convention', PeakConvention(self.peak_convention))


@dataclasses.dataclass(frozen=True, eq=False)
class SupplierSet:
    masses: np.ndarray
    locations: np.ndarray
    degenerate: bool = False

    def __len__(self):
        return len(self.masses)


@dataclasses.dataclass(frozen=True, eq=False)
class DemanderSet:
    masses: np.ndarray
    locations: np.ndarray

    def __len__(self):
        return len(self.masses)

    def mean(self):
        """ Mass-weighted mean location."""
        return self.masses @ self.locations


def relu_normalize(values):
    """ relu then L1-normalize a flat array; returns (masses, degenerate)."""
    positive = np.maximum(values, 0.0)
    total = positive.sum()
    if total < DEGENERATE_MASS:
        return np.full(values.shape, 1.0 / values.size), True
    return positive / total, False


def build_suppliers(heatmap):
    masses, degenerate = relu_normalize(heatmap.flat())
    if degenerate:
        logger.warning('heatmap has no positive mass; falling back to uniform suppliers')
    return SupplierSet(masses=masses, locations=heatmap.geometry.centers(), degenerate=degenerate)


def _require_visible(kp, joint):
    if not kp.visible:
        raise EncodingError('invisible keypoint cannot be encoded; mask this joint', joint=joint)


def subpixel_block(kp, geometry):
    """ (col, row) of the top-left pixel of the 2x2 block whose centers bracket the dot."""
    g = geometry.pixel_size
    col = min(max(math.floor(kp.x / g), 0), geometry.width - 2)
    row = min(max(math.floor(kp.y / g), 0), geometry.height - 2)
    return col, row


def build_demanders_subpixel(kp, geometry, joint=None):
    """ Four demanders on the bracketing 2x2 block with bilinear masses.

    Order: top-left, top-right, bottom-left, bottom-right.
    """
    _require_visible(kp, joint)
    kp = clamp_keypoint(kp, geometry)
    g = geometry.pixel_size
    col, row = subpixel_block(kp, geometry)
    locations = np.array([[c * g, r * g] for r in (row, row + 1) for c in (col, col + 1)], dtype=np.float64)
    wx = np.clip(g - np.abs(kp.x - locations[:, 0]), 0.0, g)
    wy = np.clip(g - np.abs(kp.y - locations[:, 1]), 0.0, g)
    masses = wx * wy / g ** 2
    return DemanderSet(masses=masses, locations=locations)


def build_demanders_naive(kp, geometry, joint=None):
    _require_visible(kp, joint)
    kp = clamp_keypoint(kp, geometry)
    col, row = containing_pixel(kp, geometry)
    g = geometry.pixel_size
    return DemanderSet(masses=np.ones(1), locations=np.array([[col * g, row * g]], dtype=np.float64))


def build_demanders(kp, geometry, mode=DemanderMode.SUBPIXEL, joint=None):
    if DemanderMode(mode) is DemanderMode.NAIVE:
        return build_demanders_naive(kp, geometry, joint=joint)
    return build_demanders_subpixel(kp, geometry, joint=joint)


def gaussian_values(kp, geometry, spec):
    kp = clamp_keypoint(kp, geometry)
    g = geometry.pixel_size
    if spec.peak_convention is PeakConvention.PEAK_ONE:
        col, row = containing_pixel(kp, geometry)
        cx, cy = col * g, row * g
    else:
        cx, cy = kp.x, kp.y
    centers = geometry.centers()
    d2 = ((centers[:, 0] - cx) ** 2 + (centers[:, 1] - cy) ** 2) / g ** 2
    return np.exp(-d2 / (2 * spec.sigma ** 2)).reshape(geometry.shape)


def build_gaussian_heatmap(kp, geometry, spec=GaussianSpec(), joint=None):
    _require_visible(kp, joint)
    return Heatmap(geometry=geometry, values=gaussian_values(kp, geometry, spec))


def dot_values(kp, geometry):
    kp = clamp_keypoint(kp, geometry)
    values = np.zeros(geometry.width * geometry.height)
    values[geometry.pixel_index(*containing_pixel(kp, geometry))] = 1.0
    return values.reshape(geometry.shape)


def build_dot_heatmap(kp, geometry, joint=None):
    _require_visible(kp, joint)
    return Heatmap(geometry=geometry, values=dot_values(kp, geometry))
