try:
    from setuptools import setup, find_packages
except ImportError:
    from distutils.core import setup
from os import path
import io

PYPI_VERSION = '0.1.0'

this_directory = path.abspath(path.dirname(__file__))
with io.open(path.join(this_directory, 'README.md'), encoding='utf-8') as f:
    long_description = f.read()

packages = find_packages()

if __name__ == "__main__":
    setup(name = 'selseg',
          author            = "Sebastian Haan",
          version           = PYPI_VERSION ,
          description       = "Selective Segmentation Network: semantic segmentation with top-down selection",
          long_description  = long_description,
          long_description_content_type='text/markdown',
          license           = 'LGPL-3.0',
          install_requires  = ['scikit_learn>=1.0',
                                'numpy>=1.21',
                                'pandas>=1.3.5',
                                'pyyaml>=6.0',
                                'scipy>=1.7.3',
                                'matplotlib>=3.5',
                                ],
          extras_require    = {'test': ['pytest>=7.0']},
          python_requires   = '>=3.8',
          packages          = packages,
          package_data      = {'selseg': ['settings/settings_ssn.yaml', 'settings/arch_*.txt']},
          include_package_data=True,
          entry_points      = {'console_scripts': ['selseg=selseg.selseg:cli']},
          classifiers       = ['Programming Language :: Python :: 3',
                                'Operating System :: OS Independent',
                               ]
          )
