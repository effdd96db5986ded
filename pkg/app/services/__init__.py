# Modeling, sampling and reporting services
