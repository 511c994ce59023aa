"""Setup configuration for volterra_lab package."""

from setuptools import setup, find_packages

setup(
    name="volterra_lab",
    version="0.1.0",
    package_dir={"": "src"},
    packages=find_packages(where="src"),
    python_requires=">=3.12",
    install_requires=[
        "numpy>=2.1.0",
        "scipy>=1.14.0",
        "pandas>=2.2.0",
        "pydantic>=2.12.0",
        "typer>=0.19.2",
        "rich>=14.2.0",
        "opentelemetry-api>=1.37.0",
        "opentelemetry-sdk>=1.37.0",
    ],
    entry_points={
        "console_scripts": [
            "volterra-lab=volterra_lab.cli:app",
        ],
    },
)
