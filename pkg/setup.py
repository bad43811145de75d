# -*- coding: utf-8 -*-
from setuptools import setup, find_packages

with open('README.md') as f:
        readme = f.read()

with open('LICENSE.md') as f:
        license = f.read()

setup(
        name='SGSFormerTools',
        version='0.1.0',
        description='A set of Python tools for under-display-camera image restoration: 1. The simulation of degraded/clean training pairs; 2. The naive instance segmentation of images; 3. The segmentation-guided sparse Transformer, its training and evaluation; 4. The plotting of samples, masks and losses.',
        long_description=readme,
        author='SGSFormerTools developers',
        license=license,
        packages=find_packages(exclude=('test', 'examples', 'data', 'reports', 'logs')),
        install_requires=['numpy', 'scipy', 'matplotlib', 'einops', 'Pillow'],
        tests_require=['hypothesis'],
        entry_points={'console_scripts': ['sgsf = pysgsf.cli:main']}
)
