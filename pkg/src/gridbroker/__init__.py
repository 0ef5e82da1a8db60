"""Pull-model resource brokers for jobs and file transfers."""
