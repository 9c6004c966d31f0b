# Pipeline module for fmnet
# Contains data ingestion, training, metrics and analysis exports
