# Spatiotemporal CAR count models
