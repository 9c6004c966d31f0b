# Networks module for fmnet
# Contains the FM building blocks, the assembled network and the baselines
