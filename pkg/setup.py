# !/usr/bin/env python
# -*- coding: utf-8 -*-

import io
import os

from setuptools import setup

# Package meta-data.
NAME = 'heatmatch'
PACKAGE_NAME = 'hmatch'
DESCRIPTION = 'Heatmap keypoint localization as optimal-transport matching of suppliers and demanders.'
KEYWORDS = 'pose-estimation keypoints heatmap optimal-transport sinkhorn earth-movers-distance'
REQUIRES_PYTHON = '>=3.8.0'
VERSION = None

REQUIRED_FOR_INSTALL = [
    'numpy>=1.20',
    'torch>=1.12',
    'POT>=0.8',
]
REQUIRED_FOR_TESTS = [
    'pytest',
    'pytest-runner',
    'hypothesis',
    'scipy>=1.6',
]

here = os.path.abspath(os.path.dirname(__file__))

with io.open(os.path.join(here, 'README.md'), encoding='utf-8') as f:
    long_description = '\n' + f.read()

# Load the package's __version__.py module as a dictionary.
about = {}
if not VERSION:
    with open(os.path.join(here, 'src', PACKAGE_NAME, '__version__.py')) as f:
        exec(f.read(), about)
else:
    about['__version__'] = VERSION


setup(
    name=NAME,
    version=about['__version__'],
    description=DESCRIPTION,
    long_description=long_description,
    long_description_content_type='text/markdown',
    keywords=KEYWORDS,
    python_requires=REQUIRES_PYTHON,
    packages=[PACKAGE_NAME],
    package_dir={'': 'src'},
    install_requires=REQUIRED_FOR_INSTALL,
    tests_require=REQUIRED_FOR_TESTS,
    extras_require={'test': REQUIRED_FOR_TESTS},
    entry_points={'console_scripts': ['hmatch=hmatch.cli:main']},
    include_package_data=True,
    license='MIT',
    classifiers=[
        # Trove classifiers
        # Full list: https://pypi.python.org/pypi?%3Aaction=list_classifiers
        'Development Status :: 3 - Alpha',
        'Intended Audience :: Science/Research',
        'License :: OSI Approved :: MIT License',
        'Operating System :: OS Independent',
        'Programming Language :: Python',
        'Programming Language :: Python :: 3',
        'Programming Language :: Python :: Implementation :: CPython',
        'Topic :: Scientific/Engineering :: Image Recognition',
        'Framework :: Pytest'
    ],
)
