# Makes src an importable package
