#!/usr/bin/env python3
"""
Setup script for dfloc (probabilistic displacement-field localization)
"""

from setuptools import setup, find_packages
from pathlib import Path

# Read README
readme_file = Path(__file__).parent / "README.md"
long_description = readme_file.read_text(encoding='utf-8') if readme_file.exists() else ""

# Read version from package
version_file = Path(__file__).parent / "dfloc" / "__init__.py"
version = "0.0.0"
if version_file.exists():
    for line in version_file.read_text().splitlines():
        if line.startswith("__version__"):
            version = line.split("=")[1].strip().strip('"').strip("'")
            break

setup(
    name="dfloc",
    version=version,
    description="Probabilistic displacement-field localization with Iterative Refinement Sampling",
    long_description=long_description,
    long_description_content_type="text/markdown",
    packages=find_packages(exclude=("examples", "examples.*")),
    include_package_data=True,
    install_requires=[
        "numpy>=1.22",
        "PyYAML>=6.0",
        "pandas>=1.4",
    ],
    extras_require={
        "test": ["pytest>=7.0.0", "scipy>=1.8"],
    },
    entry_points={
        "console_scripts": ["dfloc = dfloc.cli:main"],
    },
    python_requires=">=3.8",
    classifiers=[
        "Development Status :: 4 - Beta",
        "Intended Audience :: Science/Research",
        "Topic :: Scientific/Engineering :: Artificial Intelligence",
        "Topic :: Scientific/Engineering :: Image Recognition",
        "License :: OSI Approved :: MIT License",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.8",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
    ],
    keywords="localization cross-view regression-field von-mises-fisher autodiff",
)
