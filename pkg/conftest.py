# Repository root on sys.path for the flat module layout
