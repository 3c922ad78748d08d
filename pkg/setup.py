from setuptools import setup, find_packages

setup(
    name="density-ood",
    version="0.1.0",
    description="Likelihood-based out-of-distribution detection toolkit",
    author="Density OoD Team",
    packages=find_packages(where="src"),
    package_dir={"": "src"},
    python_requires=">=3.8",
    install_requires=[
        "numpy>=1.21",
        "scipy>=1.9",
        "scikit-learn>=1.0",
        "matplotlib>=3.4",
        "tqdm>=4.60",
    ],
    entry_points={
        "console_scripts": [
            "density-ood=density_ood.cli:main"
        ]
    }
)
