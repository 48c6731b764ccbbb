# Monitoring app for observability features 