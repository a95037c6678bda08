from importlib.metadata import version

__version__ = version("dtnforward")
del version

__all__ = ["__version__"]
