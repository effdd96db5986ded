# Schemas and domain types
