"""Node orchestration, client protocol, HTTP mapping and configuration."""
