import os
from setuptools import find_packages, setup

with open(os.path.join(os.path.dirname(__file__), 'README.md')) as readme:
    README = readme.read()

# allow setup.py to be run from any path
os.chdir(os.path.normpath(os.path.join(os.path.abspath(__file__), os.pardir)))

setup(
    name='spotscape',
    version='1.0.0',
    packages=find_packages(exclude=['examples', 'examples.*']),
    include_package_data=True,
    license='GNU AGPL v3',
    description='Self-supervised spot representations for spatially resolved transcriptomics.',
    long_description=README,
    long_description_content_type='text/markdown',
    python_requires='>=3.9',
    install_requires=[
        'django>=3.2',
        'numpy',
        'scipy',
        'pandas>=1.5',
        'scikit-learn>=1.2',
        'torch>=2.0',
        'tomli; python_version < "3.11"',
    ],
    entry_points={
        'console_scripts': [
            'spotscape=spotscape.__main__:main',
        ],
    },
    classifiers=[
        'Environment :: Console',
        'Framework :: Django',
        'Intended Audience :: Science/Research',
        'License :: OSI Approved :: GNU Affero General Public License v3',
        'Operating System :: OS Independent',
        'Programming Language :: Python',
        'Programming Language :: Python :: 3',
        'Topic :: Scientific/Engineering :: Bio-Informatics',
    ],
)
