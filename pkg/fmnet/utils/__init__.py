# Utilities module for fmnet
# Contains settings, logging, the error hierarchy and grayscale image export
