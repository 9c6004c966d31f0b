# Routers module for fmnet
# Contains the FastAPI inference router
