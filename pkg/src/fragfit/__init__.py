"""Fragment-guided flexible fitting of protein models into cryo-EM maps."""

__version__ = "0.1.0"
