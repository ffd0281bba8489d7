#!/usr/bin/env python3
"""
Setup script for the HUG3D geometry toolkit
"""

from setuptools import setup
import os

# Read the README file
def read_readme():
    readme_path = os.path.join(os.path.dirname(__file__), 'README.md')
    if os.path.exists(readme_path):
        with open(readme_path, 'r', encoding='utf-8') as f:
            return f.read()
    return "HUG3D geometry - non-neural stages of multi-person 3D reconstruction"

# Read requirements
def read_requirements():
    requirements_path = os.path.join(os.path.dirname(__file__), 'requirements.txt')
    if os.path.exists(requirements_path):
        with open(requirements_path, 'r', encoding='utf-8') as f:
            return [line.strip() for line in f if line.strip() and not line.startswith('#')]
    return []

setup(
    name="hug3d-geometry",
    version="1.0.0",
    description="Geometry toolkit for multi-person reconstruction: reprojection, rasterization, mesh refinement, texture fusion and evaluation",
    long_description=read_readme(),
    long_description_content_type="text/markdown",
    py_modules=[
        'mesh_core',
        'hug_config',
        'spatial_index',
        'mesh_io',
        'rasterizer',
        'raster_grad',
        'canonical',
        'adam',
        'pers2ortho',
        'latent_ops',
        'refine',
        'texture',
        'metrics',
        'pipeline_config',
        'fixtures',
        'hug_cli',
    ],
    install_requires=read_requirements(),
    extras_require={
        'dev': [
            'pytest',
            'pytest-cov',
        ],
    },
    entry_points={
        'console_scripts': [
            'hug3d=hug_cli:main',
        ],
    },
    classifiers=[
        "Development Status :: 4 - Beta",
        "Intended Audience :: Science/Research",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
        "Topic :: Scientific/Engineering :: Image Processing",
        "Topic :: Multimedia :: Graphics :: 3D Modeling",
    ],
    python_requires=">=3.9",
    keywords="3d-reconstruction mesh rasterizer chamfer texture multi-person",
)
