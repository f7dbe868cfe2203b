"""gccpm: pose machines with global context modules, at desk scale.

Submodules are imported on demand; ``gccpm`` itself stays free of numpy so the
command line can pin BLAS threads before the first heavy import.
"""
