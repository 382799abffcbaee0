import setuptools

# Commands to publish new package:
#
# rm -rf dist/
# python setup.py sdist
# twine upload dist/*

with open("README.md", "r") as fh:
    long_description = fh.read()

setuptools.setup(
    name="mci-mae",
    version="0.1.0",
    description="Masked-autoencoder vision transformer for multi-channel images with channel-patch masking",
    license="BSD-2-Clause Plus Patent",
    long_description=long_description,
    long_description_content_type="text/markdown",
    package_dir={"": "libs"},
    packages=[
        "mci_mae",
    ],
    python_requires=">=3.10",
    install_requires=[
        "einops",
        "matplotlib",
        "numpy",
        "pyyaml",
        "scipy",
        "torch>=2.0",
    ],
    entry_points={
        "console_scripts": [
            "mci-mae=mci_mae.cli:main",
        ],
    },
    classifiers=[
        "Programming Language :: Python :: 3",
        "License :: OSI Approved :: BSD License",
        "Operating System :: OS Independent",
    ],
)
