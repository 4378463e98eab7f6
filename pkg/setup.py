"""Setup script for pyharvim"""

from setuptools import setup

# This call to setup() does all the work
setup(
    name="pyharvim",
    version="0.1.0",
    description="Learn watermark placements that flow-prior inpainting removers cannot undo",
    long_description=open("README.md").read(),
    long_description_content_type="text/markdown",
    license="MIT",
    classifiers=[
        "License :: OSI Approved :: MIT License",
        "Programming Language :: Python",
        "Programming Language :: Python :: 3",
    ],
    packages=["pyharvim"],
    include_package_data=True,
    python_requires=">=3.8",
    install_requires=["numpy>=1.20", "scipy>=1.7", "Pillow>=8.0"],
    entry_points={"console_scripts": ["pyharvim=pyharvim.__main__:main"]},
)
