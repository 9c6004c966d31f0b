# fmnet
# Spectral super-resolution with pixel-aware function-mixture networks:
# RGB-to-hyperspectral reconstruction, metrics, analysis and ablations

__version__ = "1.0.0"
__description__ = "Pixel-aware function-mixture network for spectral super-resolution"
